import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cmath_erc.data import (
    Conversation, DataFormatError, Dataset, SynthConfig, generate_synthetic, linear_probe_accuracy,
    load_dataset, make_batches, pad_batch, stacked_features, synth_preset, write_dataset,
)


def _write_lines(path, header, records):
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for r in records:
            fh.write(json.dumps(r) + "\n")


HEADER = {"format_version": 1, "class_names": ["a", "b"], "modality_dims": [4, 3, 2], "num_speakers": 2}


def _record(n=2, dims=(4, 3, 2), labels=(0, 1)):
    return {
        "id": "c0",
        "speakers": [0] * n,
        "labels": list(labels),
        "feat_t": [[0.5] * dims[0]] * n,
        "feat_a": [[0.25] * dims[1]] * n,
        "feat_v": [[1.0] * dims[2]] * n,
    }


def test_minimal_file_loads(tmp_path):
    p = tmp_path / "d.jsonl"
    _write_lines(p, HEADER, [_record()])
    ds = load_dataset(p)
    assert len(ds) == 1 and ds.num_classes == 2
    assert ds.conversations[0].feat_t.shape == (2, 4)


def test_iemocap_header_accepted(tmp_path):
    p = tmp_path / "d.jsonl"
    header = dict(HEADER, modality_dims=[1024, 1582, 342], class_names=[str(i) for i in range(6)])
    _write_lines(p, header, [_record(dims=(1024, 1582, 342))])
    assert load_dataset(p).modality_dims == (1024, 1582, 342)


def test_ragged_audio_rejected(tmp_path):
    p = tmp_path / "d.jsonl"
    rec = _record()
    rec["feat_a"] = rec["feat_a"][:1]
    _write_lines(p, HEADER, [rec])
    with pytest.raises(DataFormatError, match="ragged conversation"):
        load_dataset(p)


@pytest.mark.parametrize("field,value,message", [
    ("labels", [0, 2], "bad label"),
    ("speakers", [0, 5], "bad speaker index"),
    ("feat_v", None, "modality missing"),
])
def test_invalid_records_rejected(tmp_path, field, value, message):
    p = tmp_path / "d.jsonl"
    rec = _record()
    rec[field] = value
    _write_lines(p, HEADER, [rec])
    with pytest.raises(DataFormatError, match=message):
        load_dataset(p)


def test_header_dims_must_match_features(tmp_path):
    p = tmp_path / "d.jsonl"
    _write_lines(p, dict(HEADER, modality_dims=[5, 3, 2]), [_record()])
    with pytest.raises(DataFormatError):
        load_dataset(p)


def test_unlabeled_conversations_allowed(tmp_path):
    p = tmp_path / "d.jsonl"
    rec = _record()
    rec["labels"] = None
    _write_lines(p, HEADER, [rec])
    assert load_dataset(p).conversations[0].labels is None


def test_round_trip_is_bit_exact(tmp_path):
    ds = generate_synthetic(SynthConfig(num_conversations=3, min_len=4, max_len=9, seed=5))
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_dataset(ds, p1)
    loaded = load_dataset(p1)
    assert loaded == ds
    write_dataset(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()


# -- synthetic generator ------------------------------------------------------
def test_iemocap_like_shape():
    ds = generate_synthetic(SynthConfig(num_conversations=20, min_len=40, max_len=60, num_classes=6,
                                        num_speakers=2, seed=0))
    lengths = [len(c) for c in ds.conversations]
    assert len(ds) == 20 and ds.num_classes == 6
    assert 45 <= np.mean(lengths) <= 55
    assert min(lengths) >= 40 and max(lengths) <= 60


def test_presets():
    cfg = synth_preset("iemocap-like", num_conversations=1)
    assert cfg.dims == (1024, 1582, 342) and cfg.num_classes == 6
    assert synth_preset("meld-like").num_classes == 7
    with pytest.raises(ValueError):
        synth_preset("nope")


def test_generator_is_deterministic():
    cfg = SynthConfig(num_conversations=4, min_len=3, max_len=6, seed=9)
    assert generate_synthetic(cfg) == generate_synthetic(cfg)


def test_splits_differ_but_share_structure():
    a = generate_synthetic(SynthConfig(num_conversations=2, seed=3, split="train"))
    b = generate_synthetic(SynthConfig(num_conversations=2, seed=3, split="test"))
    assert not np.array_equal(a.conversations[0].feat_t[:3], b.conversations[0].feat_t[:3])


def test_noise_free_direct_signal_is_linearly_separable_per_modality():
    ds = generate_synthetic(SynthConfig(num_conversations=10, min_len=20, max_len=30, noise=0.0,
                                        informativeness=(1.0, 1.0, 1.0), seed=2))
    for m in "tav":
        x, y = stacked_features(ds, m)
        assert linear_probe_accuracy(x, y, ds.num_classes) == 1.0


def test_cross_modal_signal_needs_all_modalities():
    common = dict(cross_modal_only=1.0, noise=0.0, num_classes=6, min_len=40, max_len=60, seed=4)
    train = generate_synthetic(SynthConfig(num_conversations=20, split="train", **common))
    held = generate_synthetic(SynthConfig(num_conversations=10, split="test", **common))
    chance = 1.0 / 6
    for m in "tav":
        acc = linear_probe_accuracy(*stacked_features(train, m), 6, *stacked_features(held, m))
        assert abs(acc - chance) <= 0.10, (m, acc)
    acc = linear_probe_accuracy(*stacked_features(train, "tav"), 6, *stacked_features(held, "tav"))
    assert acc > 0.90


@pytest.mark.parametrize("bad", [
    dict(min_len=5, max_len=4), dict(num_classes=1), dict(informativeness=(1.0, 2.0, 0.0)),
    dict(cross_modal_only=1.5), dict(noise=-1.0), dict(dims=(3, 0, 2)),
])
def test_synth_config_validation(bad):
    with pytest.raises(ValueError):
        SynthConfig(**bad)


# -- batching -----------------------------------------------------------------
def _tiny(lengths, C=3):
    convs = []
    for i, n in enumerate(lengths):
        convs.append(Conversation(f"c{i}", np.zeros(n, dtype=np.int64), np.arange(n) % C,
                                  np.ones((n, 2), np.float32), np.ones((n, 2), np.float32), np.ones((n, 1), np.float32)))
    return Dataset(convs, [str(c) for c in range(C)], (2, 2, 1), 1)


def test_batch_sizes():
    assert [b.size for b in make_batches(_tiny([2] * 5), 2)] == [2, 2, 1]


def test_padding_and_mask():
    batch = pad_batch(_tiny([3, 5]).conversations, 3)
    assert batch.n_max == 5
    assert batch.mask.sum(axis=1).tolist() == [3, 5]
    assert np.all(batch.feats["t"][0, 3:] == 0)
    assert np.all(batch.labels[0, 3:] == 3)


def test_unshuffled_order_and_shuffle_determinism():
    ds = _tiny([1, 2, 3, 4, 5, 6])
    assert [i for b in make_batches(ds, 4) for i in b.ids] == [c.id for c in ds.conversations]
    a = [i for b in make_batches(ds, 2, shuffle=True, seed=1, epoch=3) for i in b.ids]
    b = [i for b in make_batches(ds, 2, shuffle=True, seed=1, epoch=3) for i in b.ids]
    assert a == b and sorted(a) == sorted(c.id for c in ds.conversations)


def test_batching_errors():
    with pytest.raises(ValueError):
        make_batches(_tiny([2]), 0)
    with pytest.raises(ValueError):
        make_batches(Dataset([], ["a", "b"], (2, 2, 1), 1), 2)


@given(st.lists(st.integers(1, 12), min_size=1, max_size=9), st.integers(1, 4))
def test_mask_counts_match_utterances(lengths, batch_size):
    ds = _tiny(lengths)
    batches = make_batches(ds, batch_size)
    assert sum(int(b.mask.sum()) for b in batches) == ds.num_utterances
    for b in batches:
        for row, n in zip(b.mask, b.lengths):
            assert row[:n].all() and not row[n:].any()
