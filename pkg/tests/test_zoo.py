import numpy as np
import pytest

from gelanvit import zoo as Z
from gelanvit.tensor import Tensor

T_MINI, VIT_MINI, REPVIT_MINI = Z.SHIPPED


def _single_conv_spec(norm=0):
    text = "\n".join(
        [
            "spec_version 1",
            "name one-conv",
            "width_scale 1.0",
            "input_hw 32 32",
            "num_classes 1",
            "anchors_per_scale 1",
            "anchors 8,8",
            "layer 0 ConvBlock from=input path=local out=16 k=1",
            f"layer 1 ConvBlock from=0 path=local out=32 k=3 norm={norm}",
            "layer 2 Detect from=1 path=shared",
        ]
    )
    return Z.parse_spec(text)


@pytest.fixture(scope="module")
def specs():
    return {name: Z.zoo_spec(name) for name in Z.SHIPPED}


def test_single_conv_params_and_flops():
    rep = Z.count_flops(_single_conv_spec(), (32, 32))
    row = rep.rows[1]
    assert row.params == 4640
    assert row.flops == 9_437_184
    assert row.flops == 2 * 3 * 3 * 16 * 32 * 32 * 32


def test_empty_graph_counts_zero():
    spec = Z.GraphSpec("empty", 1.0, (64, 64), 1, ())
    assert Z.count_params(spec).total_params == 0
    assert Z.count_flops(spec).total_flops == 0


def test_upsample_and_concat_are_free(specs):
    for row in Z.count_flops(specs[VIT_MINI]).rows:
        if row.kind in ("Upsample", "Concat"):
            assert row.params == 0 and row.flops == 0


def test_report_totals_are_column_sums(specs):
    for spec in specs.values():
        rep = Z.count_flops(spec, (640, 640))
        assert rep.total_params == sum(r.params for r in rep.rows)
        assert rep.total_flops == sum(r.flops for r in rep.rows)


@pytest.mark.parametrize("name", Z.SHIPPED)
def test_built_model_matches_analytic_params(specs, name):
    model = Z.build_model(specs[name], seed=0)
    assert model.num_params() == Z.count_params(specs[name]).total_params
    per_layer = {r.id: r.params for r in Z.count_params(specs[name]).rows}
    assert model.layer_param_counts() == per_layer


@pytest.mark.parametrize("name", Z.SHIPPED)
def test_executed_flops_match_analytic(specs, name):
    assert Z.count_flops_by_execution(specs[name], (64, 64)) == Z.count_flops(specs[name], (64, 64)).total_flops


def test_complexity_orderings_at_640(specs):
    g = {n: Z.count_flops(s, (640, 640)).gflops_at_640 for n, s in specs.items()}
    p = {n: Z.count_params(s).total_params for n, s in specs.items()}
    assert g[REPVIT_MINI] < g[VIT_MINI] < g[T_MINI]
    assert p[VIT_MINI] > p[T_MINI] > p[REPVIT_MINI]


def test_gflops_at_640_refuses_other_resolutions(specs):
    with pytest.raises(ValueError):
        Z.count_flops(specs[T_MINI], (64, 64)).gflops_at_640


def test_same_seed_gives_identical_weights(specs):
    a = Z.build_model(specs[VIT_MINI], seed=3).state_arrays()
    b = Z.build_model(specs[VIT_MINI], seed=3).state_arrays()
    c = Z.build_model(specs[VIT_MINI], seed=4).state_arrays()
    assert all(x[0] == y[0] and x[1].tobytes() == y[1].tobytes() for x, y in zip(a, b))
    assert any(x[1].tobytes() != y[1].tobytes() for x, y in zip(a, c))


@pytest.mark.parametrize("name", [VIT_MINI, REPVIT_MINI])
def test_dual_path_minis_run_at_64(specs, name):
    model = Z.build_model(specs[name])
    outs = model.forward(np.zeros((1, 3, 64, 64)))
    no = model.anchors.per_scale * (5 + specs[name].num_classes)
    assert [o.shape for o in outs] == [(1, no, 64 // s, 64 // s) for s in model.anchors.strides]


def test_repvit_drops_one_head(specs):
    assert len(specs[REPVIT_MINI].heads) == len(specs[T_MINI].heads) - 1
    assert Z.head_strides(specs[REPVIT_MINI]) == [8, 16]
    assert Z.head_strides(specs[T_MINI]) == [8, 16, 32]


def test_halving_width_quarters_conv_params(specs):
    full = Z.count_params(specs[T_MINI].with_width(1.0))
    half = Z.count_params(specs[T_MINI].with_width(0.5))
    conv_kinds = ("Down", "RepNCSPELAN4", "SPPPool")
    a = sum(r.params for r in full.rows if r.kind in conv_kinds)
    b = sum(r.params for r in half.rows if r.kind in conv_kinds)
    assert 3.6 < a / b < 4.4


# -- capacity ledger -------------------------------------------------------------

@pytest.mark.parametrize("name", Z.SHIPPED)
def test_capacity_additivity(specs, name):
    led = Z.capacity_report(specs[name])
    for f in ("params", "flops"):
        parts = getattr(led.c_local, f) + getattr(led.c_global, f) + getattr(led.c_shared, f)
        assert parts == getattr(led.c_total, f)
    rep = Z.count_flops(specs[name])
    assert (led.c_total.params, led.c_total.flops) == (rep.total_params, rep.total_flops)


def test_t_mini_has_no_global_capacity(specs):
    led = Z.capacity_report(specs[T_MINI])
    assert (led.c_global.params, led.c_global.flops) == (0, 0)


def test_dual_path_minis_have_both_paths(specs):
    for name in (VIT_MINI, REPVIT_MINI):
        led = Z.capacity_report(specs[name])
        assert led.c_global.params > 0 and led.c_local.params > 0


def test_removing_vit_path_reproduces_t_mini_local(specs):
    reference = Z.zoo_spec(T_MINI, width_scale=specs[VIT_MINI].width_scale)
    stripped = Z.without_path(specs[VIT_MINI], "global")
    assert Z.capacity_report(stripped).c_local == Z.capacity_report(reference).c_local
    assert all(ly.path != "global" for ly in stripped.layers)


def test_local_path_of_dual_minis_is_t_mini_subgraph(specs):
    reference = Z.zoo_spec(T_MINI, width_scale=0.25)
    ref_rows = {r.id: (r.kind, r.params) for r in Z.count_params(reference).rows if r.path == "local"}
    for name in (VIT_MINI, REPVIT_MINI):
        rows = {r.id: (r.kind, r.params) for r in Z.count_params(specs[name]).rows if r.path == "local"}
        assert rows.items() <= ref_rows.items()


def test_untagged_layer_rejected():
    with pytest.raises(Z.SpecError, match="layer 1"):
        Z.parse_spec(Z.format_spec(_single_conv_spec()).replace("path=local out=32", "path=misc out=32"))


# -- spec text -------------------------------------------------------------------

@pytest.mark.parametrize("name", Z.SHIPPED)
def test_spec_text_round_trip(specs, name):
    text = Z.format_spec(specs[name])
    assert Z.parse_spec(text) == specs[name]
    assert Z.format_spec(Z.parse_spec(text)) == text


@pytest.mark.parametrize(
    "edit, match",
    [
        (("from=0 path=local out=32", "from=5 path=local out=32"), "layer 1"),
        (("ConvBlock from=0", "Bogus from=0"), "unknown kind"),
        (("spec_version 1", "spec_version 9"), "version"),
    ],
)
def test_spec_errors(edit, match):
    text = Z.format_spec(_single_conv_spec()).replace(*edit)
    with pytest.raises(Z.SpecError, match=match):
        Z.parse_spec(text)


def test_indivisible_input_rejected(specs):
    with pytest.raises(Z.SpecError, match="divisible"):
        Z.build_model(specs[REPVIT_MINI]).forward(np.zeros((1, 3, 40, 40)))


def test_unknown_zoo_name():
    with pytest.raises(Z.SpecError, match="unknown model"):
        Z.zoo_spec("gelan-xl")


def test_report_format_has_versioned_header(specs):
    text = Z.count_flops(specs[T_MINI]).format()
    assert text.startswith("# complexity report v1")
    assert Z.capacity_report(specs[T_MINI]).format().startswith("# capacity ledger v1")


def test_model_forward_accepts_tensor(specs):
    model = Z.build_model(specs[REPVIT_MINI])
    x = np.random.default_rng(0).standard_normal((2, 3, 64, 64))
    a = model.forward(x)
    b = model.forward(Tensor(x))
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a, b))
