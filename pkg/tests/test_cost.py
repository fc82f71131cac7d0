
from ddcmseg.costs import count
from ddcmseg.graph import ModelGraph
from ddcmseg.models import BackboneSpec, DdcmR50Spec, build_backbone, build_ddcm_r50


def test_single_conv_hand_values():
    g = ModelGraph(3, seed=0)
    g.add_conv("c", "input", 64, 3, padding="same", bias=True)
    report = count(g, (256, 256))
    row = report.rows[0]
    assert row.params == 64 * 3 * 9 + 64 == 1_792
    assert row.macs == 64 * 3 * 9 * 256 * 256 == 113_246_208
    assert row.out_shape == (1, 64, 256, 256)
    assert row.receptive_field == 3


def test_pointwise_conv_degenerate_input():
    c = 7
    g = ModelGraph(c, seed=0)
    g.add_conv("c", "input", c, 1, padding=0, bias=True)
    report = count(g, (1, 1))
    assert report.rows[0].params == c * c + c
    assert report.rows[0].macs == c * c


def test_macs_scale_linearly_with_height():
    g = build_ddcm_r50(DdcmR50Spec(backbone=BackboneSpec("tiny")), seed=0)
    base = count(g, (64, 64))
    doubled = count(g, (128, 64))
    assert doubled.total_macs == 2 * base.total_macs
    assert doubled.total_params == base.total_params


def test_bn_and_prelu_param_conventions():
    g = ModelGraph(8, seed=0)
    g.add_conv("c", "input", 8, 3, padding="same")
    g.add_bn("b", "c")
    g.add_prelu("p", "b")
    report = count(g, (16, 16))
    by_name = {r.name: r for r in report.rows}
    assert by_name["b"].params == 16
    assert by_name["p"].params == 8
    assert report.non_trainable_params == 16
    assert by_name["b"].macs == 0 and by_name["p"].macs == 0


def test_dilation_does_not_change_macs():
    reports = []
    for r in (1, 4):
        g = ModelGraph(4, seed=0)
        g.add_conv("c", "input", 4, 3, dilation=r, padding="same")
        reports.append(count(g, (32, 32)))
    assert reports[0].total_macs == reports[1].total_macs
    assert reports[0].rows[0].receptive_field == 3
    assert reports[1].rows[0].receptive_field == 9


def test_backbone_matches_hand_golden():
    g = build_backbone(BackboneSpec("resnet50-trunc3"), seed=0)
    report = count(g, (256, 256))
    assert report.total_params == 8_543_296
    assert abs(report.total_params - 8.55e6) / 8.55e6 < 0.01
    by_name = {r.name: r for r in report.rows}
    assert by_name["backbone.pool1"].out_shape == (1, 64, 64, 64)
    assert report.rows[-1].out_shape == (1, 1024, 16, 16)


def test_ddcm_r50_against_published_budget():
    g = build_ddcm_r50(DdcmR50Spec(), seed=0)
    report = count(g, (256, 256))
    assert report.total_params == 9_991_843
    assert abs(report.total_params - 9.99e6) / 9.99e6 < 0.10
    best = min(report.total_macs, report.total_flops, key=lambda v: abs(v - 4.86e9))
    assert best == report.total_macs  # MAC counting matches the published figure
    assert abs(best - 4.86e9) / 4.86e9 < 0.15


def test_totals_equal_column_sums():
    g = build_ddcm_r50(DdcmR50Spec(backbone=BackboneSpec("tiny")), seed=0)
    report = count(g, (64, 64))
    assert report.total_params == sum(r.params for r in report.rows)
    assert report.total_macs == sum(r.macs for r in report.rows)
    assert report.total_flops == 2 * report.total_macs
    assert report.cost("macs") == report.total_macs
    assert report.cost("flops") == report.total_flops


def test_conv_param_independence_from_batch():
    g = ModelGraph(3, seed=0)
    g.add_conv("c", "input", 8, 3, padding="same")
    one = count(g, (32, 32), batch=1)
    two = count(g, (32, 32), batch=2)
    assert one.total_params == two.total_params
    assert two.total_macs == 2 * one.total_macs


def test_report_rendering():
    g = build_ddcm_r50(DdcmR50Spec(backbone=BackboneSpec("tiny")), seed=0)
    report = count(g, (64, 64))
    text = report.to_text()
    assert "trainable parameters" in text and "total MACs" in text
    csv = report.to_csv()
    assert csv.splitlines()[0].startswith("layer,kind,")
    assert len(csv.splitlines()) == len(report.rows) + 2
