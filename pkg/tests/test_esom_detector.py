import time

import numpy as np
import pandas as pd
import pytest

from config import FEATURE_COLUMNS, LABEL_COLUMN, SomConfig
from esom_detector import (
    ATTACK,
    HILL,
    NORMAL,
    REGION_CODES,
    UNCLASSIFIED,
    DatasetError,
    DegenerateFeature,
    DetectorError,
    EmptyClass,
    ModelFormatError,
    SomGrid,
    best_matching_units,
    boundary_band,
    classify,
    classify_frame,
    compute_umatrix,
    evaluate,
    label_regions,
    load_model,
    model_bytes,
    normalize_features,
    read_dataset,
    save_model,
    train_model,
    train_som,
    umatrix_frame,
    write_dataset,
)
from manet_sim import synthetic_feature_frame

TRAINING_BUDGET_SECONDS = 60.0


@pytest.fixture
def separated(rng):
    return synthetic_feature_frame(600, 4.0, rng)


@pytest.fixture
def separated_model(separated, small_som):
    return train_model(separated, small_som, rng=np.random.default_rng(3))


def test_normalize_round_trips(separated):
    normalized, stats = normalize_features(separated)
    assert np.allclose(normalized.mean(axis=0), 0.0, atol=1e-9)
    assert np.allclose(normalized.std(axis=0), 1.0)
    original = separated[FEATURE_COLUMNS].to_numpy()
    assert np.allclose(stats.invert(normalized), original, rtol=0, atol=1e-9)


def test_constant_feature_is_floored(separated):
    frame = separated.copy()
    frame['nav'] = 0.5
    with pytest.warns(DegenerateFeature):
        normalized, stats = normalize_features(frame)
    assert np.all(normalized[:, 0] == 0.0)
    assert np.isfinite(normalized).all()


def test_normalize_rejects_bad_input():
    with pytest.raises(DetectorError):
        normalize_features(np.zeros((1, len(FEATURE_COLUMNS))))
    with pytest.raises(DetectorError):
        normalize_features(np.zeros((5, 3)))
    bad = np.zeros((4, len(FEATURE_COLUMNS)))
    bad[2, 1] = np.nan
    with pytest.raises(DetectorError):
        normalize_features(bad)


def test_best_match_is_the_exhaustive_argmin(rng):
    weights = rng.standard_normal((30, 7))
    points = rng.standard_normal((200, 7))
    bmus, dists = best_matching_units(weights, points)
    brute = np.argmin(((points[:, None, :] - weights[None, :, :]) ** 2).sum(axis=2), axis=1)
    assert np.array_equal(bmus, brute)
    assert np.allclose(dists, np.linalg.norm(points - weights[brute], axis=1))


def test_best_match_ties_go_to_the_lowest_index():
    weights = np.zeros((3, 7))
    weights[0, 0] = 2.0
    weights[2, 0] = 2.0
    weights[1, 0] = 10.0
    bmus, _ = best_matching_units(weights, np.array([[1.0, 0, 0, 0, 0, 0, 0]]))
    assert bmus[0] == 0


def test_training_is_deterministic(separated, small_som):
    normalized, _ = normalize_features(separated)
    first = train_som(normalized, small_som, rng=np.random.default_rng(9))
    second = train_som(normalized, small_som, rng=np.random.default_rng(9))
    assert np.array_equal(first.weights, second.weights)


def test_training_needs_a_seeded_generator(separated, small_som):
    normalized, _ = normalize_features(separated)
    with pytest.raises(TypeError):
        train_som(normalized, small_som)
    with pytest.raises(TypeError):
        train_model(separated, small_som)


def test_single_point_pulls_every_neuron_onto_it(small_som):
    point = np.arange(7, dtype=float).reshape(1, -1)
    grid = train_som(point, small_som, rng=np.random.default_rng(0))
    assert np.allclose(grid.weights, point)


def test_training_reports_every_epoch(separated, small_som):
    normalized, _ = normalize_features(separated)
    seen = []
    train_som(normalized, small_som, rng=np.random.default_rng(1), on_epoch=lambda epoch, w: seen.append(epoch))
    assert seen == list(range(small_som.epochs))


def test_flat_map_has_zero_uheights():
    grid = SomGrid(4, 5, np.ones((20, 7)))
    assert np.array_equal(compute_umatrix(grid), np.zeros((4, 5)))


def test_uheight_is_the_mean_neighbour_distance():
    weights = np.zeros((9, 7))
    weights[4, 0] = 8.0
    u = compute_umatrix(SomGrid(3, 3, weights))
    assert u[1, 1] == pytest.approx(8.0)
    # a corner has three neighbours, one of them the centre
    assert u[0, 0] == pytest.approx(8.0 / 3)


def test_separated_classes_get_both_regions(separated_model):
    labels = separated_model.labeling.labels
    assert (labels == REGION_CODES[ATTACK]).any()
    assert (labels == REGION_CODES[NORMAL]).any()
    assert separated_model.labeling.hill_fraction == pytest.approx(0.15, abs=1 / labels.size)


def test_single_class_training_labels_every_valley_normal(rng, small_som):
    frame = synthetic_feature_frame(300, 4.0, rng, attack_fraction=0.0)
    normalized, _ = normalize_features(frame)
    grid = train_som(normalized, small_som, rng=rng)
    with pytest.warns(EmptyClass):
        labeling = label_regions(grid, compute_umatrix(grid), normalized, frame[LABEL_COLUMN])
    valleys = labeling.labels[labeling.labels != REGION_CODES[HILL]]
    assert np.all(valleys == REGION_CODES[NORMAL])


def test_unknown_labels_are_refused(separated, small_som):
    normalized, _ = normalize_features(separated)
    grid = train_som(normalized, small_som, rng=np.random.default_rng(0))
    labels = separated[LABEL_COLUMN].replace(ATTACK, 'blackhole')
    with pytest.raises(DetectorError):
        label_regions(grid, compute_umatrix(grid), normalized, labels)


def test_point_on_an_attack_neuron_is_an_attack(separated_model):
    grid, labeling = separated_model.grid, separated_model.labeling
    neuron = int(np.flatnonzero(labeling.labels == REGION_CODES[ATTACK])[0])
    result = classify(grid, labeling, grid.weights[neuron])
    assert result.verdict == ATTACK
    assert result.best_match == neuron
    assert result.distance == pytest.approx(0.0)


def test_hill_best_match_is_unclassified(separated_model):
    grid, labeling = separated_model.grid, separated_model.labeling
    neuron = int(np.flatnonzero(labeling.labels == REGION_CODES[HILL])[0])
    assert classify(grid, labeling, grid.weights[neuron]).verdict == UNCLASSIFIED


def test_separated_clusters_are_detected(separated_model, rng):
    test = synthetic_feature_frame(400, 4.0, rng)
    verdicts = classify_frame(separated_model, test)
    scores = evaluate(verdicts['verdict'], test[LABEL_COLUMN])
    assert scores['detection_rate'] >= 0.95
    assert scores['false_alarm_rate'] <= 0.05
    assert list(verdicts.index) == list(test.index)


def test_boundary_band_sits_on_high_uheights(separated_model):
    grid, labeling = separated_model.grid, separated_model.labeling
    band = boundary_band(grid, labeling)
    u = compute_umatrix(grid).reshape(-1)
    assert band.any() and not band.all()
    assert u[band].mean() >= 1.5 * u[~band].mean()


@pytest.mark.slow
@pytest.mark.parametrize('separation, detection, false_alarm', [(4.0, 0.95, 0.05), (1.5, 0.80, None)])
def test_detection_at_full_map_size(separation, detection, false_alarm):
    rng = np.random.default_rng(2024)
    train = synthetic_feature_frame(2000, separation, rng)
    test = synthetic_feature_frame(1000, separation, rng)
    started = time.perf_counter()
    model = train_model(train, SomConfig(), rng=np.random.default_rng(5))
    assert time.perf_counter() - started < TRAINING_BUDGET_SECONDS
    scores = evaluate(classify_frame(model, test)['verdict'], test[LABEL_COLUMN])
    assert scores['detection_rate'] >= detection
    if false_alarm is not None:
        assert scores['false_alarm_rate'] <= false_alarm


def test_detection_rises_with_separation(small_som):
    rates = []
    for index, separation in enumerate((0.25, 0.75, 1.5, 3.0)):
        rng = np.random.default_rng(100 + index)
        train = synthetic_feature_frame(600, separation, rng)
        test = synthetic_feature_frame(600, separation, rng)
        model = train_model(train, small_som, rng=np.random.default_rng(7))
        scores = evaluate(classify_frame(model, test)['verdict'], test[LABEL_COLUMN])
        rates.append((scores['detection_rate'], scores['false_alarm_rate']))

    detection = [d for d, _ in rates]
    youden = [d - f for d, f in rates]
    assert all(later > earlier for earlier, later in zip(youden, youden[1:]))
    assert all(later >= earlier - 0.05 for earlier, later in zip(detection, detection[1:]))
    assert detection[-1] - detection[0] >= 0.2


def test_perfect_verdicts():
    scores = evaluate([ATTACK, NORMAL, ATTACK], [ATTACK, NORMAL, ATTACK])
    assert (scores['detection_rate'], scores['false_alarm_rate']) == (1.0, 0.0)


def test_all_attack_verdicts():
    scores = evaluate([ATTACK] * 4, [ATTACK, NORMAL, NORMAL, ATTACK])
    assert (scores['detection_rate'], scores['false_alarm_rate']) == (1.0, 1.0)


def test_absent_class_rate_is_none():
    scores = evaluate([NORMAL, NORMAL], [NORMAL, NORMAL])
    assert scores['detection_rate'] is None
    assert scores['false_alarm_rate'] == 0.0


def test_unclassified_verdicts_are_excluded_by_default():
    verdicts = [ATTACK, UNCLASSIFIED, NORMAL, UNCLASSIFIED]
    truth = [ATTACK, ATTACK, NORMAL, NORMAL]
    scores = evaluate(verdicts, truth)
    assert (scores['detection_rate'], scores['false_alarm_rate'], scores['unclassified']) == (1.0, 0.0, 2)
    counted = evaluate(verdicts, truth, count_unclassified=True)
    assert counted['detection_rate'] == 0.5


def test_evaluate_needs_aligned_sequences():
    with pytest.raises(DetectorError):
        evaluate([ATTACK], [ATTACK, NORMAL])


def test_saved_model_loads_back(separated_model, tmp_path):
    path = tmp_path / 'model.esom'
    save_model(separated_model, path)
    loaded = load_model(path)
    assert np.array_equal(loaded.labeling.labels, separated_model.labeling.labels)
    assert np.array_equal(loaded.labeling.classes, separated_model.labeling.classes)
    assert loaded.labeling.threshold == separated_model.labeling.threshold
    assert np.allclose(loaded.grid.weights, separated_model.grid.weights, atol=1e-5)
    assert np.array_equal(loaded.stats.mean, separated_model.stats.mean)
    assert model_bytes(loaded) == path.read_bytes()


def test_corrupt_model_files_are_refused(separated_model, tmp_path):
    path = tmp_path / 'model.esom'
    save_model(separated_model, path)
    data = path.read_bytes()
    (tmp_path / 'short.esom').write_bytes(data[:10])
    (tmp_path / 'magic.esom').write_bytes(b'XXXX' + data[4:])
    (tmp_path / 'trunc.esom').write_bytes(data[:-1])
    for name in ('short.esom', 'magic.esom', 'trunc.esom'):
        with pytest.raises(ModelFormatError):
            load_model(tmp_path / name)


def test_umatrix_frame_has_one_row_per_neuron(separated_model):
    grid = separated_model.grid
    frame = umatrix_frame(grid, compute_umatrix(grid), separated_model.labeling)
    assert len(frame) == grid.size
    assert set(frame['region']) <= {NORMAL, ATTACK, HILL}


def test_dataset_round_trips_through_csv(separated, tmp_path):
    path = tmp_path / 'train.csv'
    write_dataset(separated, path)
    frame = read_dataset(path)
    assert list(frame[LABEL_COLUMN]) == list(separated[LABEL_COLUMN])
    assert np.allclose(frame[FEATURE_COLUMNS], separated[FEATURE_COLUMNS], rtol=1e-8)


def test_bad_dataset_rows_are_named(separated, tmp_path):
    frame = separated.head(6).copy()
    frame['tx_rate'] = frame['tx_rate'].astype(object)
    frame.loc[3, 'tx_rate'] = 'n/a'
    path = tmp_path / 'bad.csv'
    frame.to_csv(path, index=False)
    with pytest.raises(DatasetError, match='row 5: bad value in column tx_rate'):
        read_dataset(path)


def test_bad_labels_and_missing_columns(separated, tmp_path):
    labels = separated.head(4).copy()
    labels.loc[2, LABEL_COLUMN] = 'blackhole'
    labels.to_csv(tmp_path / 'labels.csv', index=False)
    with pytest.raises(DatasetError, match='row 4'):
        read_dataset(tmp_path / 'labels.csv')

    separated.drop(columns=['nav']).to_csv(tmp_path / 'cols.csv', index=False)
    with pytest.raises(DatasetError, match='missing columns'):
        read_dataset(tmp_path / 'cols.csv')

    with pytest.raises(DatasetError, match='not found'):
        read_dataset(tmp_path / 'absent.csv')


def test_unlabeled_dataset_needs_only_features(separated, tmp_path):
    separated.drop(columns=[LABEL_COLUMN]).to_csv(tmp_path / 'x.csv', index=False)
    frame = read_dataset(tmp_path / 'x.csv', labeled=False)
    assert list(frame.columns) == FEATURE_COLUMNS
    assert isinstance(frame, pd.DataFrame)
