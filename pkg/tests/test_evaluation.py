import numpy as np
import pytest

from bpreg.errors import ConfigError
from bpreg.evaluation import (
    LandmarkStats,
    SliceScoreReferenceTable,
    accuracy_5class,
    build_reference_table,
    lmse,
    lmse_per_landmark,
    normalize_scores,
    r2_metric,
    r2_summary,
    z_test_compare,
)
from bpreg.landmarks import EVALUATION_LANDMARKS, FIVE_CLASSES
from bpreg.volumes import PreprocessedVolume


def light_volume(vid, n_slices):
    return PreprocessedVolume(np.zeros((n_slices, 1, 1), dtype=np.float32), 1.0, source_id=vid)


def make_table(means, stds=None):
    stds = stds or {k: 0.0 for k in means}
    return SliceScoreReferenceTable(
        entries={k: LandmarkStats(mean=v, std=stds[k], count=2) for k, v in means.items()}
    )


def linear_table(lo=0.0, hi=100.0):
    """Reference table with evaluation-landmark means evenly spread."""
    means = {name: lo + (hi - lo) * i / 11 for i, name in enumerate(EVALUATION_LANDMARKS)}
    return make_table(means)


# --- independent oracles (plain loops over the definitions) -----------------

def lmse_bruteforce(score_map, annotations, table):
    d = (table.mean("eyes-end") - table.mean("pelvis-start")) / 100.0
    phis = []
    for vid, scores in score_map.items():
        errors = []
        for name, idx in annotations.get(vid, {}).items():
            if name in EVALUATION_LANDMARKS and name in table:
                errors.append(((table.mean(name) - scores[idx]) / d) ** 2)
        if errors:
            phis.append(sum(errors) / len(errors))
    mean = sum(phis) / len(phis)
    if len(phis) > 1:
        var = sum((p - mean) ** 2 for p in phis) / (len(phis) - 1)
        se = (var / len(phis)) ** 0.5
    else:
        se = 0.0
    return mean, se


def accuracy_bruteforce(score_map, annotations, table):
    l1 = table.mean("pelvis-start")
    d = (table.mean("eyes-end") - l1) / 100.0
    bounds = [(table.mean(FIVE_CLASSES[0][1]) - l1) / d] + [
        (table.mean(c[2]) - l1) / d for c in FIVE_CLASSES
    ]
    per_volume = []
    for vid, scores in score_map.items():
        marks = annotations.get(vid, {})
        correct = total = 0
        for j, s in enumerate(scores):
            truth = None
            for ci, (_, start, end) in enumerate(FIVE_CLASSES):
                if start in marks and end in marks and marks[start] <= j < marks[end]:
                    truth = ci
            if truth is None:
                continue
            s_star = (s - l1) / d
            predicted = None
            for ci in range(5):
                if bounds[ci] <= s_star < bounds[ci + 1]:
                    predicted = ci
                    break
            total += 1
            correct += int(predicted == truth)
        if total:
            per_volume.append(correct / total)
    return sum(per_volume) / len(per_volume)


def random_fixture(seed):
    """Random volumes, monotone-ish scores and partial annotations."""
    rng = np.random.default_rng(seed)
    table = linear_table(float(rng.uniform(-50, 0)), float(rng.uniform(50, 150)))
    score_map, annotations, volumes = {}, {}, []
    for v in range(rng.integers(2, 5)):
        vid = f"v{v}"
        n = int(rng.integers(24, 60))
        scores = np.sort(rng.uniform(-30, 160, n)) + rng.normal(0, 3, n)
        names = set(rng.choice(EVALUATION_LANDMARKS, size=rng.integers(2, 9), replace=False))
        if v == 0:
            names |= {"pelvis-start", "eyes-end"}  # keep tables constructible
        indices = np.sort(rng.choice(n, size=len(names), replace=False))
        ordered = [lm for lm in EVALUATION_LANDMARKS if lm in names]
        annotations[vid] = {name: int(idx) for name, idx in zip(ordered, indices)}
        score_map[vid] = list(map(float, scores))
        volumes.append(light_volume(vid, n))
    return score_map, annotations, volumes, table


class TestReferenceTable:
    def test_single_volume_mean(self):
        vols = [light_volume("a", 10)]
        scores = {"a": list(range(10))}
        ann = {"a": {"pelvis-start": 7, "eyes-end": 9}}
        table = build_reference_table(scores, vols, ann)
        assert table.mean("pelvis-start") == 7.0
        assert table.entries["pelvis-start"].count == 1
        assert table.entries["pelvis-start"].std == 0.0

    def test_two_volume_std_uses_n_minus_one(self):
        vols = [light_volume("a", 10), light_volume("b", 10)]
        scores = {"a": [4.0] * 10, "b": [6.0] * 10}
        ann = {
            "a": {"pelvis-start": 0, "eyes-end": 9, "L5": 4},
            "b": {"pelvis-start": 1, "eyes-end": 8, "L5": 5},
        }
        scores["a"][0], scores["b"][1] = 0.0, 0.0
        scores["a"][9], scores["b"][8] = 100.0, 100.0
        table = build_reference_table(scores, vols, ann)
        assert table.mean("L5") == 5.0
        assert table.entries["L5"].std == pytest.approx(np.sqrt(2.0))

    def test_missing_scale_landmark_fails(self):
        vols = [light_volume("a", 10)]
        with pytest.raises(ConfigError, match="eyes-end"):
            build_reference_table({"a": list(range(10))}, vols, {"a": {"pelvis-start": 0}})

    def test_non_monotone_means_warn(self):
        vols = [light_volume("a", 12)]
        scores = {"a": [0, 50, 100, 20, 0, 0, 0, 0, 0, 0, 0, 0]}
        ann = {"a": {"pelvis-start": 0, "femur-end": 1, "L5": 3, "eyes-end": 2}}
        with pytest.warns(RuntimeWarning, match="monotone"):
            build_reference_table(scores, vols, ann)


class TestNormalizeScores:
    def test_endpoints(self):
        table = linear_table(10.0, 30.0)
        out = normalize_scores([10.0, 30.0], table)
        assert out[0] == pytest.approx(0.0)
        assert out[1] == pytest.approx(100.0)

    def test_affine_model_change_is_invisible(self):
        score_map, annotations, volumes, _ = random_fixture(0)
        table = build_reference_table(score_map, volumes, annotations)
        transformed_map = {k: [2 * s + 3 for s in v] for k, v in score_map.items()}
        table2 = build_reference_table(transformed_map, volumes, annotations)
        for vid in score_map:
            a = normalize_scores(score_map[vid], table)
            b = normalize_scores(transformed_map[vid], table2)
            np.testing.assert_allclose(a, b, atol=1e-9)


class TestLmse:
    def test_perfect_predictions_zero(self):
        table = linear_table()
        vols = [light_volume("a", 12)]
        ann = {"a": {name: i for i, name in enumerate(EVALUATION_LANDMARKS)}}
        scores = {"a": [table.mean(name) for name in EVALUATION_LANDMARKS]}
        assert lmse(scores, vols, ann, table).mean == 0.0

    def test_single_landmark_off_by_d_gives_one(self):
        table = linear_table()
        d = table.d
        vols = [light_volume("a", 3)]
        ann = {"a": {"L5": 1}}
        scores = {"a": [0.0, table.mean("L5") + d, 0.0]}
        result = lmse(scores, vols, ann, table)
        assert result.mean == pytest.approx(1.0, rel=1e-12)

    def test_two_volume_aggregation(self):
        # phis {1, 3} -> mean 2, se = std/sqrt(2) = 1
        table = linear_table()
        d = table.d
        vols = [light_volume("a", 2), light_volume("b", 2)]
        ann = {"a": {"L5": 0}, "b": {"L5": 0}}
        scores = {"a": [table.mean("L5") + d, 0.0], "b": [table.mean("L5") + np.sqrt(3) * d, 0.0]}
        result = lmse(scores, vols, ann, table)
        assert result.mean == pytest.approx(2.0, rel=1e-9)
        assert result.standard_error == pytest.approx(1.0, rel=1e-9)
        assert result.per_volume["a"] == pytest.approx(1.0)
        assert result.per_volume["b"] == pytest.approx(3.0)

    def test_volume_without_eval_landmark_excluded(self):
        table = linear_table()
        vols = [light_volume("a", 4), light_volume("b", 4)]
        ann = {"a": {"L5": 1}, "b": {"kidneys": 1}}  # kidneys is not an evaluation landmark
        scores = {"a": [0.0, table.mean("L5"), 0, 0], "b": [0.0, 1.0, 2.0, 3.0]}
        with pytest.warns(RuntimeWarning, match="excluded"):
            result = lmse(scores, vols, ann, table)
        assert set(result.per_volume) == {"a"}

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_matches_bruteforce_on_random_fixtures(self):
        for seed in range(300):
            score_map, annotations, volumes, table = random_fixture(seed)
            result = lmse(score_map, volumes, annotations, table)
            expected_mean, expected_se = lmse_bruteforce(score_map, annotations, table)
            assert result.mean == pytest.approx(expected_mean, abs=1e-9)
            assert result.standard_error == pytest.approx(expected_se, abs=1e-9)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_landmark_first_aggregation_mode(self):
        score_map, annotations, volumes, table = random_fixture(1)
        by_volume = lmse(score_map, volumes, annotations, table, aggregate="volume")
        by_landmark = lmse(score_map, volumes, annotations, table, aggregate="landmark")
        per_landmark = lmse_per_landmark(score_map, volumes, annotations, table)
        expected = np.mean([v[0] for v in per_landmark.values()])
        assert by_landmark.mean == pytest.approx(expected, rel=1e-12)
        assert by_landmark.mean != by_volume.mean  # fixtures are unbalanced

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_scale_invariance_with_rebuilt_table(self):
        score_map, annotations, volumes, _ = random_fixture(2)
        table = build_reference_table(score_map, volumes, annotations)
        base = lmse(score_map, volumes, annotations, table)
        transformed = {k: [2 * s + 3 for s in v] for k, v in score_map.items()}
        table2 = build_reference_table(transformed, volumes, annotations)
        redone = lmse(transformed, volumes, annotations, table2)
        assert abs(base.mean - redone.mean) <= 1e-9


class TestZTest:
    def test_reference_comparison_not_significant(self):
        t, significant = z_test_compare(3.3, 0.4, 2.65, 0.28)
        assert t == pytest.approx(1.3, abs=0.05)
        assert not significant

    def test_identical_models(self):
        t, significant = z_test_compare(2.0, 0.3, 2.0, 0.3)
        assert t == 0.0 and not significant

    def test_clearly_different(self):
        t, significant = z_test_compare(10.0, 0.1, 2.0, 0.1)
        assert abs(t) == pytest.approx(56.57, abs=0.01)
        assert significant

    def test_antisymmetric(self):
        a = z_test_compare(3.1, 0.2, 2.5, 0.4)
        b = z_test_compare(2.5, 0.4, 3.1, 0.2)
        assert a.t == pytest.approx(-b.t, rel=1e-12)

    def test_positive_errors_required(self):
        with pytest.raises(ValueError):
            z_test_compare(1.0, 0.0, 2.0, 0.1)


class TestAccuracy:
    def _full_annotation(self, table, n=60):
        """Scores interpolating the table pseudo-labels along the volume."""
        names = EVALUATION_LANDMARKS
        indices = np.linspace(0, n - 1, len(names)).astype(int)
        ann = {name: int(i) for name, i in zip(names, indices)}
        means = np.array([table.mean(x) for x in names])
        scores = np.interp(np.arange(n), indices, means)
        return ann, list(map(float, scores))

    def test_perfect_interpolation_is_one(self):
        table = linear_table()
        ann, scores = self._full_annotation(table)
        vols = [light_volume("a", len(scores))]
        psi = accuracy_5class({"a": scores}, vols, {"a": ann}, table)
        assert psi == 1.0

    def test_one_class_off_is_zero(self):
        # every slice scored at the midpoint of the class above its own
        # (head slices land beyond eyes-end): zero accuracy
        table = linear_table()
        ann, _ = self._full_annotation(table)
        n = 60
        class_names = [c[0] for c in FIVE_CLASSES]
        bound_names = [FIVE_CLASSES[0][1]] + [c[2] for c in FIVE_CLASSES]
        bounds = [table.mean(x) for x in bound_names]
        scores = []
        for j in range(n):
            truth = next(
                ci for ci, (_, start, end) in enumerate(FIVE_CLASSES)
                if ann[start] <= j < ann[end] or (ci == len(FIVE_CLASSES) - 1 and j == n - 1)
            ) if j < n - 1 else len(FIVE_CLASSES) - 1
            if truth < len(class_names) - 1:
                scores.append((bounds[truth + 1] + bounds[truth + 2]) / 2)
            else:
                scores.append(bounds[-1] + 10.0)
        vols = [light_volume("a", n)]
        psi = accuracy_5class({"a": scores}, vols, {"a": ann}, table)
        assert psi == 0.0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_matches_bruteforce_on_random_fixtures(self):
        checked = 0
        for seed in range(300):
            score_map, annotations, volumes, table = random_fixture(seed)
            try:
                psi = accuracy_5class(score_map, volumes, annotations, table)
            except ConfigError:
                continue  # no classifiable volume in this fixture
            checked += 1
            assert psi == pytest.approx(accuracy_bruteforce(score_map, annotations, table), abs=1e-12)
        assert checked > 50

    def test_unclassifiable_volume_warns(self):
        table = linear_table()
        vols = [light_volume("a", 10), light_volume("b", 10)]
        ann_a, scores_a = self._full_annotation(table, n=10)
        ann = {"a": ann_a, "b": {"L5": 2}}  # b has no complete class interval
        scores = {"a": scores_a, "b": [0.0] * 10}
        with pytest.warns(RuntimeWarning, match="classifiable"):
            accuracy_5class(scores, vols, ann, table)


class TestR2:
    def test_perfect_line(self):
        assert r2_metric(np.arange(10) * 2.0 + 1.0) == pytest.approx(1.0)

    def test_zigzag_closed_form(self):
        # the (+e, -e, -e, +e) pattern is orthogonal to both the constant
        # and the linear trend, so the fit recovers the line exactly and
        # the residual sum is n * e^2
        n, eps, slope, intercept = 16, 0.5, 2.0, -3.0
        idx = np.arange(n, dtype=np.float64)
        pattern = np.tile([eps, -eps, -eps, eps], n // 4)
        scores = slope * idx + intercept + pattern
        fit = slope * idx + intercept
        expected = 1.0 - (n * eps**2) / np.sum((fit - fit.mean()) ** 2)
        assert r2_metric(scores) == pytest.approx(expected, rel=1e-12)

    def test_constant_scores_undefined(self):
        assert r2_metric(np.full(10, 3.0)) is None

    def test_too_short(self):
        with pytest.raises(ValueError):
            r2_metric([1.0, 2.0])

    def test_summary_skips_undefined(self):
        values, mean, se = r2_summary([np.arange(5.0), np.full(5, 1.0)])
        assert values[1] is None
        assert mean == pytest.approx(1.0)
