"""The verification suites themselves (the heavy full run lives in the
acceptance module)."""

from anet.gradcheck import COMPOSED_TOL, PRIMITIVE_TOL, format_results, primitive_checks


class TestPrimitiveSuite:
    def test_all_primitives_within_tolerance(self):
        results = primitive_checks()
        names = {r.name for r in results}
        for op in ("conv2d", "linear", "relu", "sigmoid", "softplus", "softmax",
                   "gap", "add", "mul", "concat", "l2norm", "pairwise_sq_dist",
                   "normalize_batch", "normalize_instance", "normalize_ibn_split"):
            assert op in names
        for r in results:
            assert r.ok, f"{r.name}: {r.max_rel_err} > {r.tolerance}"
            assert r.tolerance == PRIMITIVE_TOL

    def test_report_lists_per_op_error(self):
        text = format_results(primitive_checks())
        assert "conv2d" in text and "max_rel_err" in text
        assert text.count("PASS") >= 15
