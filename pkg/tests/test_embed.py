import hashlib
import math

import numpy as np
import pytest

from provhunt.embed import (
    EncoderConfig,
    TrainConfig,
    build_vocab,
    embed_corpus,
    embed_text,
    encode,
    info_nce_loss,
    init_params,
    load_external_embeddings,
    load_params,
    pair_loss,
    pair_loss_and_grads,
    project,
    save_params,
    token_ids,
    tokenize,
    train,
)
from provhunt.errors import FormatError, TrainingDivergedError
from provhunt.pemb import EmbeddingTable, read_pemb, write_pemb

# -- tokenizer ---------------------------------------------------------------

def test_tokenize_log_line():
    assert tokenize("nginx connect 78.205.235.65:80") == [
        "nginx",
        "connect",
        "78",
        "205",
        "235",
        "65",
        "80",
    ]


def test_tokenize_path():
    assert tokenize("/tmp/vUgefal") == ["tmp", "vugefal"]


def test_tokenize_empty():
    assert tokenize("") == []


def test_oov_token_bucket_deterministic():
    vocab = {"seen": 0}
    params = init_params(vocab, EncoderConfig(dim=4, out_dim=3, hash_buckets=16), seed=0)
    ids = token_ids(["unseen-token"], params)
    # oracle: stable 8-byte blake2b digest modulo the bucket count
    digest = hashlib.blake2b(b"unseen-token", digest_size=8).digest()
    expected = 1 + int.from_bytes(digest, "little") % 16
    assert ids == [expected]
    assert 1 <= ids[0] < 1 + 16
    assert token_ids(["unseen-token"], params) == ids


# -- encode --------------------------------------------------------------------

@pytest.fixture
def small_params():
    vocab = build_vocab(["alpha beta gamma delta"])
    return init_params(vocab, EncoderConfig(dim=4, out_dim=3, hash_buckets=8), seed=1)


def test_encode_empty_is_zero(small_params):
    assert np.array_equal(encode([], "log", small_params), np.zeros(4))


def test_encode_single_token_is_row(small_params):
    row = small_params.emb_log[small_params.vocab["alpha"]]
    assert np.array_equal(encode(["alpha"], "log", small_params), row)


def test_encode_two_tokens_average_oracle(small_params):
    a = small_params.emb_text[small_params.vocab["alpha"]]
    b = small_params.emb_text[small_params.vocab["beta"]]
    got = encode(["alpha", "beta"], "text", small_params)
    assert np.allclose(got, (a + b) / 2.0, atol=0, rtol=0)


# -- project ----------------------------------------------------------------------

def test_project_zero_weights(small_params):
    pp = small_params.proj_log
    pp.w1[:] = 0.0
    pp.b1[:] = 0.0
    pp.w2[:] = 0.0
    pp.b2[:] = 0.0
    out = project(np.ones(4), "log", small_params)
    assert np.array_equal(out, np.zeros(3))


def test_project_residual_passthrough(small_params):
    pp = small_params.proj_log
    pp.w2[:] = 0.0
    pp.b2[:] = -100.0
    x = np.array([0.3, -0.2, 0.7, 0.1])
    h1 = np.maximum(pp.w1 @ x + pp.b1, 0.0)
    assert np.allclose(project(x, "log", small_params), h1, atol=0, rtol=0)


def test_project_matches_straight_line_oracle(small_params):
    rng = np.random.default_rng(2)
    pp = small_params.proj_log
    pp.w1[:] = rng.normal(size=pp.w1.shape)
    pp.b1[:] = rng.normal(size=pp.b1.shape)
    pp.w2[:] = rng.normal(size=pp.w2.shape)
    pp.b2[:] = rng.normal(size=pp.b2.shape)
    x = rng.normal(size=4)
    # independent recomputation with explicit loops
    h1 = [max(sum(pp.w1[i][j] * x[j] for j in range(4)) + pp.b1[i], 0.0) for i in range(3)]
    z2 = [sum(pp.w2[i][j] * h1[j] for j in range(3)) + pp.b2[i] for i in range(3)]
    expected = [h1[i] + max(z2[i], 0.0) for i in range(3)]
    assert np.allclose(project(x, "log", small_params), expected, atol=1e-12, rtol=0)


def test_project_dimension_mismatch(small_params):
    with pytest.raises(ValueError):
        project(np.zeros(7), "log", small_params)


# -- loss ---------------------------------------------------------------------------

def test_loss_single_pair_is_zero():
    v = np.array([[1.0, 0.0]])
    assert info_nce_loss(v, v, 0.5) == 0.0


def test_loss_orthonormal_two_pairs_tau1():
    v = np.array([[1.0, 0.0], [0.0, 1.0]])
    expected = 2 * math.log(1 + math.exp(-1))  # closed-form softmax oracle
    assert info_nce_loss(v, v, 1.0) == pytest.approx(expected, abs=1e-12)
    assert info_nce_loss(v, v, 1.0) == pytest.approx(0.6265, abs=1e-4)


def test_loss_orthonormal_two_pairs_tau007():
    v = np.array([[1.0, 0.0], [0.0, 1.0]])
    expected = 2 * math.log(1 + math.exp(-1 / 0.07))
    got = info_nce_loss(v, v, 0.07)
    assert got == pytest.approx(expected, rel=1e-6)
    assert got < 1e-5


def test_loss_rejects_unnormalized():
    v = np.array([[1.0, 0.0], [0.0, 2.0]])
    with pytest.raises(ValueError):
        info_nce_loss(v, v, 1.0)


def test_loss_nonnegative_random():
    rng = np.random.default_rng(4)
    for _ in range(50):
        n, d = int(rng.integers(1, 9)), int(rng.integers(2, 6))
        v = rng.normal(size=(n, d))
        u = rng.normal(size=(n, d))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        assert info_nce_loss(v, u, 0.3) >= 0.0


def test_loss_permutation_invariance_exact():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = int(rng.integers(2, 8))
        v = rng.normal(size=(n, 4))
        u = rng.normal(size=(n, 4))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        perm = rng.permutation(n)
        assert info_nce_loss(v, u, 0.2) == info_nce_loss(v[perm], u[perm], 0.2)


def test_loss_modality_swap_exact():
    rng = np.random.default_rng(6)
    for _ in range(20):
        n = int(rng.integers(2, 8))
        v = rng.normal(size=(n, 5))
        u = rng.normal(size=(n, 5))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        assert info_nce_loss(v, u, 0.4) == info_nce_loss(u, v, 0.4)


def test_loss_saturates_to_zero_in_small_tau_limit():
    # identity pairing with every diagonal strictly dominant: tau -> 0 drives
    # the softmax to one-hot and the loss to zero
    rng = np.random.default_rng(7)
    v = rng.normal(size=(4, 6))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    losses = [info_nce_loss(v, v, tau) for tau in (0.5, 0.1, 0.02)]
    assert losses[0] > losses[1] > losses[2]
    assert losses[2] < 1e-6


# -- gradient check -------------------------------------------------------------------

def _random_instance(rng, shared=False):
    vocab = {f"t{i}": i for i in range(8)}
    cfg = EncoderConfig(dim=4, out_dim=3, hash_buckets=4, shared_projection=shared)
    params = init_params(vocab, cfg, seed=int(rng.integers(0, 2**31)))
    total = 8 + 4
    params.emb_log[:] = rng.normal(0.0, 0.6, size=(total, 4))
    params.emb_text[:] = rng.normal(0.0, 0.6, size=(total, 4))
    projs = [params.proj_log]
    if not shared:
        projs.append(params.proj_text)
    for pp in projs:
        pp.w1[:] = rng.normal(0.0, 0.8, size=pp.w1.shape)
        pp.b1[:] = rng.normal(0.0, 0.5, size=pp.b1.shape)
        pp.w2[:] = rng.normal(0.0, 0.8, size=pp.w2.shape)
        pp.b2[:] = rng.normal(0.0, 0.5, size=pp.b2.shape)
    params.rho = float(rng.normal(np.log(0.3), 0.1))
    log_ids = [list(rng.integers(0, 12, size=rng.integers(1, 5))) for _ in range(3)]
    text_ids = [list(rng.integers(0, 12, size=rng.integers(1, 5))) for _ in range(3)]
    log_ids = [[int(i) for i in row] for row in log_ids]
    text_ids = [[int(i) for i in row] for row in text_ids]
    return params, log_ids, text_ids


def _min_preactivation(params, log_ids, text_ids):
    smallest = np.inf
    for ids_batch, emb, pp in (
        (log_ids, params.emb_log, params.proj_log),
        (text_ids, params.emb_text, params.proj_text),
    ):
        for ids in ids_batch:
            x = emb[ids].mean(axis=0) if ids else np.zeros(params.dim)
            z1 = pp.w1 @ x + pp.b1
            h1 = np.maximum(z1, 0.0)
            z2 = pp.w2 @ h1 + pp.b2
            smallest = min(smallest, np.abs(z1).min(), np.abs(z2).min())
    return smallest


def _param_slots(params):
    slots = [
        ("emb_log", params.emb_log),
        ("emb_text", params.emb_text),
        ("w1_log", params.proj_log.w1),
        ("b1_log", params.proj_log.b1),
        ("w2_log", params.proj_log.w2),
        ("b2_log", params.proj_log.b2),
    ]
    if not params.shared_projection:
        slots += [
            ("w1_text", params.proj_text.w1),
            ("b1_text", params.proj_text.b1),
            ("w2_text", params.proj_text.w2),
            ("b2_text", params.proj_text.b2),
        ]
    return slots


def _analytic_vector(params, grads):
    parts = []
    for name, arr in _param_slots(params):
        if name == "emb_log":
            dense = np.zeros_like(arr)
            uids, acc = grads.emb_log
            if len(uids):
                dense[uids] = acc
            parts.append(dense.ravel())
        elif name == "emb_text":
            dense = np.zeros_like(arr)
            uids, acc = grads.emb_text
            if len(uids):
                dense[uids] = acc
            parts.append(dense.ravel())
        else:
            side = "log" if name.endswith("_log") else "text"
            g = grads.proj_log if side == "log" else grads.proj_text
            if params.shared_projection:
                combined = {
                    "w1": grads.proj_log.w1 + grads.proj_text.w1,
                    "b1": grads.proj_log.b1 + grads.proj_text.b1,
                    "w2": grads.proj_log.w2 + grads.proj_text.w2,
                    "b2": grads.proj_log.b2 + grads.proj_text.b2,
                }
                parts.append(combined[name.split("_")[0]].ravel())
            else:
                parts.append(getattr(g, name.split("_")[0]).ravel())
    parts.append(np.array([grads.rho]))
    return np.concatenate(parts)


def _fd_vector(params, log_ids, text_ids, h=1e-6):
    parts = []
    for _, arr in _param_slots(params):
        flat = arr.ravel()
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = pair_loss(params, log_ids, text_ids)
            flat[i] = orig - h
            lo = pair_loss(params, log_ids, text_ids)
            flat[i] = orig
            fd[i] = (hi - lo) / (2 * h)
        parts.append(fd)
    orig = params.rho
    params.rho = orig + h
    hi = pair_loss(params, log_ids, text_ids)
    params.rho = orig - h
    lo = pair_loss(params, log_ids, text_ids)
    params.rho = orig
    parts.append(np.array([(hi - lo) / (2 * h)]))
    return np.concatenate(parts)


def gradient_check(n_instances=100, seed=1234, shared=False):
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < n_instances:
        params, log_ids, text_ids = _random_instance(rng, shared=shared)
        # stay away from relu kinks where the loss is not differentiable
        if _min_preactivation(params, log_ids, text_ids) < 1e-3:
            continue
        _, grads = pair_loss_and_grads(params, log_ids, text_ids)
        ga = _analytic_vector(params, grads)
        gn = _fd_vector(params, log_ids, text_ids)
        rel = np.linalg.norm(ga - gn) / max(np.linalg.norm(ga) + np.linalg.norm(gn), 1e-12)
        worst = max(worst, rel)
        done += 1
    return worst


def test_gradient_check_small_sample():
    assert gradient_check(n_instances=10, seed=99) < 1e-4


def test_gradient_check_shared_projection():
    assert gradient_check(n_instances=5, seed=7, shared=True) < 1e-4


# -- training ------------------------------------------------------------------------

def _toy_pairs(n_classes=6, per_class=3):
    pairs = []
    for c in range(n_classes):
        for j in range(per_class):
            pairs.append(
                (
                    f"proc{c} open file{c} ; proc{c} read blob{c} part{j}",
                    f"intel class {c} marker{c} variant {j}",
                )
            )
    return pairs


def test_train_loss_decreases():
    pairs = _toy_pairs()
    cfg = TrainConfig(batch_size=6, epochs=40, learning_rate=0.05, dropout=0.0, seed=3)
    result = train(pairs, cfg, encoder_cfg=EncoderConfig(dim=16, out_dim=8, hash_buckets=16))
    assert result.epoch_losses[-1] < result.epoch_losses[0]


def test_train_deterministic_byte_identical(tmp_path):
    pairs = _toy_pairs()
    cfg = TrainConfig(batch_size=6, epochs=5, learning_rate=0.05, dropout=0.5, seed=11)
    ecfg = EncoderConfig(dim=8, out_dim=6, hash_buckets=8)
    p1 = tmp_path / "a.pprm"
    p2 = tmp_path / "b.pprm"
    save_params(str(p1), train(pairs, cfg, encoder_cfg=ecfg).params)
    save_params(str(p2), train(pairs, cfg, encoder_cfg=ecfg).params)
    assert p1.read_bytes() == p2.read_bytes()


def test_train_requires_enough_pairs():
    with pytest.raises(ValueError):
        train([("a", "b")], TrainConfig(batch_size=64))


def test_train_nan_aborts_with_diagnostics():
    pairs = _toy_pairs()
    params = init_params(
        build_vocab(t for p in pairs for t in p),
        EncoderConfig(dim=4, out_dim=3, hash_buckets=4),
        seed=0,
    )
    params.emb_log[0, 0] = np.nan
    cfg = TrainConfig(batch_size=6, epochs=1, learning_rate=0.01, dropout=0.0, seed=0)
    with pytest.raises(TrainingDivergedError) as exc:
        train(pairs, cfg, params_init=params)
    assert exc.value.tau > 0


def test_default_tau_initialization():
    params = init_params({"a": 0}, EncoderConfig(dim=4, out_dim=3, hash_buckets=2), seed=0)
    assert params.tau == pytest.approx(0.07, rel=1e-12)


def test_train_config_defaults_match_expected():
    cfg = TrainConfig()
    assert cfg.batch_size == 64
    assert cfg.epochs == 100
    assert cfg.learning_rate == pytest.approx(1e-5)
    assert cfg.dropout == 0.5


# -- corpus embedding + files -----------------------------------------------------------

def test_embed_corpus_unit_norm_and_purity(small_params):
    texts = ["alpha beta", "gamma", "alpha beta"]
    table = embed_corpus(texts, "log", small_params)
    norms = np.linalg.norm(table.vectors, axis=1)
    assert np.all(np.abs(norms - 1.0) <= 1e-6)
    assert np.array_equal(table.vectors[0], table.vectors[2])


def test_scale_invariance_of_normalized_embedding(small_params):
    x = encode(tokenize("alpha beta gamma"), "log", small_params)
    g = project(x, "log", small_params)
    from provhunt.embed import normalize

    assert np.allclose(normalize(3.7 * g), normalize(g), atol=1e-12)


def test_pemb_round_trip_bit_exact(tmp_path, small_params):
    table = embed_corpus(["alpha", "beta gamma", "delta"], "text", small_params)
    path = tmp_path / "e.pemb"
    write_pemb(str(path), table)
    loaded = read_pemb(str(path))
    assert loaded.vectors.dtype == np.float32
    assert np.array_equal(loaded.vectors, table.vectors.astype(np.float32))
    assert loaded.ids == table.ids
    assert loaded.normalized
    # second write/read round-trips bit-exactly
    path2 = tmp_path / "e2.pemb"
    write_pemb(str(path2), loaded)
    assert path.read_bytes() == path2.read_bytes()


def test_load_external_embeddings_dim768(tmp_path):
    rng = np.random.default_rng(8)
    vecs = rng.normal(size=(3, 768))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    path = tmp_path / "x.pemb"
    write_pemb(str(path), EmbeddingTable(vectors=vecs, ids=["a", "b", "c"], normalized=True))
    table = load_external_embeddings(str(path))
    assert table.vectors.shape == (3, 768)
    assert np.all(np.abs(np.linalg.norm(table.vectors, axis=1) - 1.0) <= 1e-6)
    assert np.allclose(table.vectors, vecs, atol=1e-7)


def test_load_external_renormalizes_raw(tmp_path):
    vecs = np.array([[3.0, 4.0], [0.0, 2.0]])
    path = tmp_path / "raw.pemb"
    write_pemb(str(path), EmbeddingTable(vectors=vecs, ids=["a", "b"], normalized=False))
    table = load_external_embeddings(str(path))
    assert np.allclose(table.vectors[0], [0.6, 0.8], atol=1e-7)


def test_truncated_pemb_rejected(tmp_path):
    rng = np.random.default_rng(9)
    vecs = rng.normal(size=(4, 16))
    path = tmp_path / "t.pemb"
    write_pemb(str(path), EmbeddingTable(vectors=vecs, ids=list("abcd"), normalized=False))
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(FormatError):
        read_pemb(str(path))


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.pemb"
    path.write_bytes(b"NOPE!" + b"\x00" * 32)
    with pytest.raises(FormatError):
        read_pemb(str(path))


# -- checkpoints -------------------------------------------------------------------------

def test_params_checkpoint_round_trip_exact(tmp_path, small_params):
    path = tmp_path / "p.pprm"
    save_params(str(path), small_params)
    loaded = load_params(str(path))
    assert loaded.vocab == small_params.vocab
    assert np.array_equal(loaded.emb_log, small_params.emb_log)
    assert np.array_equal(loaded.emb_text, small_params.emb_text)
    assert np.array_equal(loaded.proj_text.w2, small_params.proj_text.w2)
    assert loaded.rho == small_params.rho
    # saving the loaded params reproduces the same bytes
    path2 = tmp_path / "p2.pprm"
    save_params(str(path2), loaded)
    assert path.read_bytes() == path2.read_bytes()


def test_shared_projection_round_trip(tmp_path):
    params = init_params(
        {"a": 0}, EncoderConfig(dim=4, out_dim=3, hash_buckets=2, shared_projection=True), seed=2
    )
    path = tmp_path / "s.pprm"
    save_params(str(path), params)
    loaded = load_params(str(path))
    assert loaded.shared_projection
    assert loaded.proj_log is loaded.proj_text
