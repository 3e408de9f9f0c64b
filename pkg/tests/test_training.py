import csv

import numpy as np
import pytest

from capnet import nn, training
from capnet.dataset import SyntheticSpec, generate_synthetic, read_stimulus, split_videos
from capnet.metrics import CCCReport, CCCStats
from capnet.models import CapNet, CausalityExtractor, FeatureCache, FerHead, FerModel, PrecomputedExtractor, TinyCnn
from capnet.records import AffectState
from capnet.sampler import SamplerConfig, enumerate_single_pairs, enumerate_windows
from capnet.training import EarlyStopping, TrainConfig, fit, train_capnet, train_fer


def _report(m):
    s = CCCStats(0, 0, 1, 1, m, m, 2)
    return CCCReport(s, s)


def _replay(metrics, patience=4, max_epochs=200):
    seq = iter(metrics)
    params = {"w": np.zeros(1)}

    def train_epoch(epoch):
        params["w"][0] = epoch
        return 0.0

    return fit(train_epoch, lambda: _report(next(seq)), lambda: params,
               TrainConfig(patience=patience, max_epochs=max_epochs))


def test_patience_flat_metric_stops_after_five():
    r = _replay([0.5] * 5 + [0.9])
    assert len(r.history) == 5 and r.stopped_early and r.best_epoch == 1
    assert r.best_params["w"][0] == 1


def test_best_checkpoint_is_argmax():
    r = _replay([0.3, 0.6, 0.4, 0.4, 0.4, 0.4, 0.9])
    assert r.best_epoch == 2 and len(r.history) == 6
    assert r.best_params["w"][0] == 2
    assert r.best_report.mean_ccc == 0.6


def test_improvement_must_be_strict_and_resets_counter():
    r = _replay([0.1, 0.2, 0.2, 0.2, 0.3, 0.3, 0.3, 0.3, 0.3])
    assert r.best_epoch == 5 and len(r.history) == 9


def test_max_epochs_bound():
    r = _replay(np.linspace(0, 1, 50), max_epochs=7)
    assert len(r.history) == 7 and not r.stopped_early and r.best_epoch == 7


def test_early_stopping_counter():
    es = EarlyStopping(2)
    assert es.update(1, 0.1) and not es.update(2, 0.1) and not es.should_stop
    assert not es.update(3, 0.05) and es.should_stop


@pytest.mark.parametrize("kw", [dict(batch_size=1), dict(patience=0), dict(max_epochs=0), dict(lr=0.0)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw).validate()


def test_defaults():
    c = TrainConfig()
    assert (c.batch_size, c.lr, c.patience) == (128, 1e-5, 4)


# -- a fast feature-level causal task ---------------------------------------

def stimulus_task(num_videos=6, frames=200, seed=0, w=3):
    """Videos whose per-frame feature is the stimulus itself (plus noise channels)."""
    sc = SamplerConfig(w=w)
    spec = SyntheticSpec(num_videos, frames, seed=seed, sampler=sc)
    rng = np.random.default_rng(seed)
    from capnet.dataset import stimulus_labels
    from capnet.records import FrameRef, LabeledVideo
    cache = FeatureCache(3)
    videos = []
    for k in range(spec.num_videos):
        vid = f"s{k}"
        u = rng.integers(0, 256, size=frames) / 127.5 - 1
        for t in range(1, frames + 1):
            cache.put(vid, t, [u[t - 1], rng.normal(), 1.0])
        videos.append(LabeledVideo(vid, 30, {t: FrameRef(vid, t) for t in range(1, frames + 1)},
                                   stimulus_labels(u, sc)))
    return videos, cache, sc


def _capnet_on(cache, sc, seed=0, H=16, M=16):
    return CapNet(PrecomputedExtractor(cache), CausalityExtractor(cache.dim, H, M, rng=np.random.default_rng(seed)),
                  sc.length)


def _windows(videos, sc):
    train_v, val_v = split_videos(videos, 0.34)
    return ([w for v in train_v for w in enumerate_windows(v, sc)],
            [w for v in val_v for w in enumerate_windows(v, sc)])


def test_epoch_one_loss_is_deterministic():
    videos, cache, sc = stimulus_task()
    tr, va = _windows(videos, sc)
    cfg = TrainConfig(batch_size=32, lr=1e-3, max_epochs=1, seed=5)
    a = train_capnet(tr, va, _capnet_on(cache, sc), cfg, sc)
    b = train_capnet(tr, va, _capnet_on(cache, sc), cfg, sc)
    assert abs(a.history[0].train_loss - b.history[0].train_loss) <= 1e-12
    c = train_capnet(tr, va, _capnet_on(cache, sc), TrainConfig(batch_size=32, lr=1e-3, max_epochs=1, seed=6), sc)
    assert c.history[0].train_loss != a.history[0].train_loss


def test_training_loss_trend_and_restores_best():
    videos, cache, sc = stimulus_task()
    tr, va = _windows(videos, sc)
    model = _capnet_on(cache, sc)
    res = train_capnet(tr, va, model, TrainConfig(batch_size=32, lr=3e-3, max_epochs=50, patience=50), sc)
    losses = [r.train_loss for r in res.history]
    assert len(losses) == 50
    assert np.median(losses[40:50]) < np.median(losses[:10])
    # restored parameters reproduce the best epoch's validation report
    feats = np.stack([[cache.get(*r.key) for r in w.slots] for w in va])
    labels = np.array([tuple(w.label) for w in va])
    from capnet.metrics import report_from_arrays
    assert report_from_arrays(model.predict_features(feats), labels).mean_ccc == pytest.approx(
        res.best_report.mean_ccc, abs=1e-12)
    assert res.best_report.mean_ccc > 0.8


def test_window_length_mismatch():
    videos, cache, sc = stimulus_task(num_videos=3)
    tr, va = _windows(videos, sc)
    with pytest.raises(ValueError, match="expects"):
        train_capnet(tr, va, _capnet_on(cache, SamplerConfig(w=1)), TrainConfig(), sc)
    with pytest.raises(ValueError):
        train_capnet([], va, _capnet_on(cache, sc), TrainConfig(), sc)


# -- image-level runs --------------------------------------------------------

@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    videos = generate_synthetic(SyntheticSpec(3, 120, seed=2, image_size=2), root)
    return root, videos


def test_frozen_extractor_is_untouched(synth):
    _, videos = synth
    sc = SamplerConfig(w=1)
    rng = np.random.default_rng(0)
    cnn = TinyCnn(4, 8, rng=rng)
    before = {k: v.copy() for k, v in cnn.params().items()}
    model = CapNet(cnn, CausalityExtractor(4, 5, 6, rng=rng), sc.length)
    tr, va = [list(enumerate_windows(v, sc)) for v in (videos[0], videos[2])]
    train_capnet(tr, va, model, TrainConfig(batch_size=16, lr=1e-2, max_epochs=1), sc)
    for k, v in cnn.params().items():
        assert v.tobytes() == before[k].tobytes()


def test_unfrozen_extractor_is_updated(synth):
    _, videos = synth
    sc = SamplerConfig(w=1)
    rng = np.random.default_rng(0)
    cnn = TinyCnn(4, 8, rng=rng)
    before = {k: v.copy() for k, v in cnn.params().items()}
    model = CapNet(cnn, CausalityExtractor(4, 5, 6, rng=rng), sc.length)
    tr = list(enumerate_windows(videos[0], sc))[:32]
    va = list(enumerate_windows(videos[2], sc))[:16]
    res = train_capnet(tr, va, model, TrainConfig(batch_size=16, lr=1e-2, max_epochs=1, freeze_extractor=False), sc)
    assert res.best_epoch == 1
    assert any(v.tobytes() != before[k].tobytes() for k, v in cnn.params().items())


def test_fer_learns_current_frame_identity(tmp_path):
    """Labels that are a deterministic function of the current gray level are learnable."""
    videos = generate_synthetic(SyntheticSpec(5, 100, seed=4, image_size=2), tmp_path)
    for v in videos:
        u = read_stimulus(tmp_path / v.video_id / "stimulus.csv")
        v.labels = {t: AffectState(u[t], -u[t]) for t in u}
    train_v, val_v = split_videos(videos, 0.2)
    pairs = lambda vs: [p for v in vs for p in enumerate_single_pairs(v)]
    rng = np.random.default_rng(0)
    model = FerModel(TinyCnn(8, 8, rng=rng), FerHead(8, rng=rng))
    res = train_fer(pairs(train_v), pairs(val_v), model,
                    TrainConfig(batch_size=16, lr=1e-2, max_epochs=50))
    assert res.best_report.mean_ccc > 0.95


def test_write_log(tmp_path):
    r = _replay([0.3, 0.6, 0.4, 0.4, 0.4, 0.4])
    training.write_log(r.history, tmp_path / "log.csv")
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert rows[0] == ["epoch", "train_loss", "val_valence", "val_arousal", "val_mean", "seconds"]
    assert len(rows) == 7 and rows[2][:5] == ["2", "0.0", "0.6", "0.6", "0.6"]


def test_checkpoint_header_and_reload(tmp_path):
    videos, cache, sc = stimulus_task(num_videos=2, frames=120)
    model = _capnet_on(cache, sc)
    path = tmp_path / "c.capc"
    training.save_model(path, model, sc)
    t = nn.load_checkpoint(path)
    np.testing.assert_array_equal(t["config"], [3, 16, 16, 3, 10, 1 / 3, 30])
    assert training.header_sampler(t) == sc
    back, sc2 = training.load_capnet(path, PrecomputedExtractor(cache))
    x = np.random.default_rng(0).normal(size=(4, 9, 3))
    np.testing.assert_array_equal(back.predict_features(x), model.predict_features(x))
    with pytest.raises(ValueError):
        training.load_capnet(path)  # no extractor weights and no cache
    fer_path = tmp_path / "f.capc"
    training.save_model(fer_path, FerModel(TinyCnn(4, 8), FerHead(4)))
    assert training.header_sampler(nn.load_checkpoint(fer_path)) is None
    with pytest.raises(ValueError):
        training.load_capnet(fer_path)
