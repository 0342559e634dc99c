import numpy as np
import pytest

from fgaes.difftoken import Token, TokenSeq
from fgaes.encoder import (
    EncoderConfig,
    EncoderError,
    encode,
    init_params,
    load_checkpoint,
    save_checkpoint,
    text_embed,
)
from fgaes.ndiff import Tape, backward, grad_check

TINY = EncoderConfig(
    d_model=16, n_heads=2, n_layers=2, mlp_ratio=2, pos_grid=3,
    embed_dim=8, base_patch=4, seed=0,
)


def token_seq(n, seed, base_patch=4):
    rng = np.random.default_rng(seed)
    tokens = [
        Token(
            pixels=rng.random((base_patch, base_patch, 3)),
            u=float(rng.uniform(0.05, 0.95)),
            v=float(rng.uniform(0.05, 0.95)),
            scale="coarse" if k % 2 else "fine",
        )
        for k in range(n)
    ]
    return TokenSeq(tokens=tokens, source_dims=(64, 64), grid=(2, 2), tau=0.5)


def test_init_deterministic():
    a = init_params(TINY)
    b = init_params(TINY)
    assert a.paths() == b.paths()
    for p in a.paths():
        assert a.values[p].tobytes() == b.values[p].tobytes()


def test_layer_norm_gains_start_at_one():
    params = init_params(TINY)
    assert np.array_equal(params.values["block0.ln1.g"], np.ones(16))
    assert np.array_equal(params.values["final_ln.b"], np.zeros(16))


def expected_param_count(cfg: EncoderConfig) -> int:
    # independent count: patch proj + pos grid + cls + blocks + final ln + heads
    d, g, e, pd, r = cfg.d_model, cfg.pos_grid, cfg.embed_dim, cfg.patch_dim, cfg.mlp_ratio
    per_block = (
        2 * d + 2 * d          # two layer norms
        + 4 * (d * d + d)      # q, k, v, o projections
        + (d * r * d + d * r) + (d * r * d + d)  # mlp in / out
    )
    return (
        pd * d + d             # patch projection
        + g * g * d            # position table
        + d                    # cls
        + cfg.n_layers * per_block
        + 2 * d                # final norm
        + (d * cfg.n_bins + cfg.n_bins)
        + (d * e + e)
    )


def test_param_count_matches_independent_formula():
    assert init_params(TINY).n_params() == expected_param_count(TINY)
    default = EncoderConfig()
    n = init_params(default).n_params()
    assert n == expected_param_count(default)
    assert n <= 200_000


def test_default_param_count_frozen_regression():
    # (d=64, heads=4, layers=2, mlp=4, G=14, bins=10, embed=32, base_patch=16):
    # 49216 proj + 12544 grid + 64 cls + 2*49984 blocks + 128 ln + 650 + 2080 heads
    assert init_params(EncoderConfig()).n_params() == 164_650


def test_encode_outputs_valid_distribution():
    params = init_params(TINY)
    tape = Tape()
    bound = params.bind(tape)
    cls, out = encode(tape, bound, token_seq(5, 1))
    assert cls.shape == (16,)
    assert out.dist.shape == (10,)
    assert abs(out.dist.data.sum() - 1.0) < 1e-12
    assert np.all(out.dist.data >= 0)
    assert 1.0 <= out.score.item() <= 10.0
    assert out.score.item() == pytest.approx(
        float(np.arange(1, 11) @ out.dist.data), abs=0
    )
    assert out.embed.shape == (8,)


def test_encode_deterministic():
    params = init_params(TINY)
    seq = token_seq(4, 2)
    outs = []
    for _ in range(2):
        tape = Tape()
        _, out = encode(tape, params.bind(tape), seq)
        outs.append(out.dist.data)
    assert outs[0].tobytes() == outs[1].tobytes()


def test_token_permutation_invariance():
    params = init_params(TINY)
    seq = token_seq(6, 3)
    perm = [3, 0, 5, 1, 4, 2]
    shuffled = TokenSeq(
        tokens=[seq.tokens[i] for i in perm],
        source_dims=seq.source_dims,
        grid=seq.grid,
        tau=seq.tau,
    )
    t1, t2 = Tape(), Tape()
    _, a = encode(t1, params.bind(t1), seq)
    _, b = encode(t2, params.bind(t2), shuffled)
    assert np.max(np.abs(a.dist.data - b.dist.data)) < 1e-9
    assert abs(a.score.item() - b.score.item()) < 1e-9


def test_empty_sequence_rejected():
    params = init_params(TINY)
    tape = Tape()
    empty = TokenSeq(tokens=[], source_dims=(64, 64), grid=(2, 2), tau=0.0)
    with pytest.raises(EncoderError):
        encode(tape, params.bind(tape), empty)


def test_full_model_gradients_match_finite_differences():
    params = init_params(TINY)
    seq = token_seq(5, 4)
    probe = np.random.default_rng(5).standard_normal(10)

    def f(tape, bound):
        from fgaes.encoder import TapeParams

        tp = TapeParams(TINY, bound)
        _, out = encode(tape, tp, seq)
        from fgaes.ndiff import constant

        return tape.sum(tape.mul(out.dist, constant(probe)))

    err = grad_check(f, params.values)
    assert err < 1e-5


def test_every_parameter_group_reaches_score():
    params = init_params(TINY)
    seq = token_seq(5, 6)
    tape = Tape()
    bound = params.bind(tape)
    _, out = encode(tape, bound, seq)
    grads = backward(tape, out.score)
    for path in params.paths():
        if path.startswith("head_embed"):
            continue  # alignment head does not feed the score
        g = grads[bound.leaf_node(path)].data
        assert np.any(g != 0.0), f"no gradient reached {path}"


def test_text_embed_passthrough_and_hashing():
    vec = np.zeros(8)
    vec[2] = 2.0
    out = text_embed(vec, 8)
    assert np.allclose(out, vec / 2.0)
    assert np.allclose(np.linalg.norm(out), 1.0)

    a = text_embed("far more refined", 8)
    b = text_embed("far more refined", 8)
    c = text_embed("lacks the depth", 8)
    assert np.array_equal(a, b)
    assert float(a @ c) < 0.99
    with pytest.raises(EncoderError):
        text_embed(np.zeros(5), 8)
    with pytest.raises(EncoderError):
        text_embed("", 8)


def test_checkpoint_round_trip_exact(tmp_path):
    params = init_params(TINY)
    path = tmp_path / "ckpt.json"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    assert loaded.cfg == params.cfg
    for p in params.paths():
        assert loaded.values[p].tobytes() == params.values[p].tobytes()


def test_checkpoint_version_guard(tmp_path):
    params = init_params(TINY)
    path = tmp_path / "ckpt.json"
    save_checkpoint(params, path)
    import json

    payload = json.loads(path.read_text())
    payload["version"] = 99
    path.write_text(json.dumps(payload))
    with pytest.raises(EncoderError):
        load_checkpoint(path)
