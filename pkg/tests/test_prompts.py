import numpy as np
import pytest

import lico.tensor as T
from lico.errors import ConfigError, ContractError, DomainError
from lico.prompts import (
    FrozenTextEncoder,
    MappingNet,
    PromptBank,
    PromptConfig,
    TextBranch,
    group_structured_table,
    load_embedding_file,
)
from lico.tensor import GradientTape, Tensor

from helpers import unit_rows, write_embedding_file
from oracles import central_diff, rel_errors

RNG = np.random.default_rng(9)


def make_bank(num_context=3, embed_dim=8, num_classes=4, mode="learnable", seed=1, **kw):
    cfg = PromptConfig(num_context=num_context, embed_dim=embed_dim, visual_dim=5,
                       hidden_dim=6, mode=mode, **kw)
    table = unit_rows(np.random.default_rng(seed), num_classes, embed_dim)
    return PromptBank(cfg, table, seed=seed)


def test_identity_permutation_puts_class_token_last():
    bank = make_bank()
    m = bank.tokens
    prompt = bank.build_prompt(2, list(range(m)))
    np.testing.assert_allclose(prompt.data[:-1], bank.context_tokens.data, atol=1e-7)
    np.testing.assert_allclose(prompt.data[-1], bank.class_table.data[2], atol=1e-7)


def test_build_prompt_deterministic():
    bank = make_bank()
    perm = [2, 0, 3, 1]
    a = bank.build_prompt(1, perm).numpy()
    b = bank.build_prompt(1, perm).numpy()
    np.testing.assert_array_equal(a, b)


def test_permutation_preserves_row_multiset():
    bank = make_bank()
    ident = bank.build_prompt(0, [0, 1, 2, 3]).numpy()
    shuf = bank.build_prompt(0, [3, 1, 0, 2]).numpy()
    key = lambda rows: sorted(map(tuple, rows.round(6)))
    assert key(ident) == key(shuf)


def test_invalid_label_and_permutation():
    bank = make_bank()
    with pytest.raises(DomainError):
        bank.build_prompt(99, [0, 1, 2, 3])
    with pytest.raises(ContractError):
        bank.build_prompt(0, [0, 1, 1, 3])
    with pytest.raises(ContractError):
        bank.build_prompt(0, [0, 1, 2])


def test_batch_matches_single():
    bank = make_bank()
    perm = [1, 3, 2, 0]
    labels = np.array([0, 3, 3, 1])
    batch = bank.build_prompt_batch(labels, perm).numpy()
    for i, lab in enumerate(labels):
        single = bank.build_prompt(int(lab), perm).numpy()
        np.testing.assert_allclose(batch[i], single, atol=1e-7)


def test_class_table_requires_unit_rows():
    cfg = PromptConfig(num_context=2, embed_dim=4, visual_dim=3, hidden_dim=4)
    bad = np.full((3, 4), 2.0, dtype=np.float32)
    with pytest.raises(ConfigError):
        PromptBank(cfg, bad)


def test_gradients_reach_context_but_not_class_table():
    bank = make_bank()
    with GradientTape() as tape:
        prompt = bank.build_prompt_batch(np.array([1, 2]), [0, 1, 2, 3])
        grads = tape.backward(T.tsum(T.mul(prompt, prompt)))
    assert bank.context_tokens in grads
    assert bank.class_table not in grads
    assert bank.class_table.grad is None or not np.any(bank.class_table.grad)


def test_frozen_encoder_bit_identical_for_seed():
    a = FrozenTextEncoder(4, 8, seed=7)
    b = FrozenTextEncoder(4, 8, seed=7)
    for (ka, va), (kb, vb) in zip(sorted(a.weights().items()), sorted(b.weights().items())):
        assert ka == kb
        np.testing.assert_array_equal(va.data, vb.data)


def test_frozen_encoder_weights_get_no_gradient():
    enc = FrozenTextEncoder(3, 6, seed=2)
    x = Tensor(RNG.normal(size=(3, 6)), requires_grad=True)
    with GradientTape() as tape:
        out = enc.encode(x)
        grads = tape.backward(T.tsum(T.mul(out, out)))
    assert x in grads
    for w in enc.weights().values():
        assert w not in grads


def test_frozen_encoder_input_gradient_matches_fd():
    enc = FrozenTextEncoder(3, 6, seed=2)
    for w in enc.weights().values():
        w.data = w.data.astype(np.float64)
    x = Tensor(RNG.normal(0, 0.5, size=(3, 6)), requires_grad=True, dtype=np.float64)

    def loss():
        out = enc.encode(x)
        return T.tsum(T.mul(out, out))

    with GradientTape() as tape:
        grads = tape.backward(loss())
    fd = central_diff(lambda: float(loss().item()), [x.data])
    assert rel_errors(grads[x], fd[0]).max() < 1e-3


def test_single_token_mixing_is_identity_softmax():
    enc = FrozenTextEncoder(1, 5, seed=3)
    x = RNG.normal(size=(1, 5)).astype(np.float32)
    out = enc.encode(Tensor(x)).numpy()
    expect = (x @ enc.wv.data) * enc.pos_scale.data + enc.pos_shift.data
    np.testing.assert_allclose(out, expect, atol=1e-6)


def test_position_sensitivity():
    # swapping two tokens must change the encoded sequence beyond a permutation
    enc = FrozenTextEncoder(3, 6, seed=5)
    x = RNG.normal(size=(3, 6)).astype(np.float32)
    swapped = x[[1, 0, 2]]
    a = enc.encode(Tensor(x)).numpy()
    b = enc.encode(Tensor(swapped)).numpy()
    assert not np.allclose(a[[1, 0, 2]], b, atol=1e-5)


def test_mapping_net_shapes_and_paper_scale_config():
    big = MappingNet(512, 512, 49, seed=0)
    assert big.w1.shape == (512, 512) and big.w2.shape == (512, 49)
    out = big.map(Tensor(RNG.normal(size=(13, 512))))
    assert out.shape == (13, 49)


def test_mapping_net_zero_weights_zero_output():
    net = MappingNet(4, 3, 2, seed=0)
    for p in net.parameters().values():
        p.data[...] = 0.0
    out = net.map(Tensor(RNG.normal(size=(5, 4))))
    np.testing.assert_array_equal(out.data, np.zeros((5, 2)))


def test_mapping_net_gradient_matches_fd():
    net = MappingNet(4, 6, 3, seed=1)
    for p in net.parameters().values():
        p.data = p.data.astype(np.float64)
    x = Tensor(RNG.normal(0, 0.8, size=(5, 4)), dtype=np.float64)

    def loss():
        out = net.map(x)
        return T.tsum(T.mul(out, out))

    with GradientTape() as tape:
        grads = tape.backward(loss())
    for name, p in net.parameters().items():
        fd = central_diff(lambda: float(loss().item()), [p.data])
        assert rel_errors(grads[p], fd[0]).max() < 1e-3, name


def test_text_branch_end_to_end_gradient_wrt_context():
    bank = make_bank(num_context=2, embed_dim=6, num_classes=3)
    branch = TextBranch(bank, seed=4)
    for p in branch.state_tensors().values():
        p.data = p.data.astype(np.float64)
    labels = np.array([0, 2])
    perm = [2, 0, 1]

    def loss():
        g = branch.prompt_features(labels, perm)
        return T.tsum(T.mul(g, g))

    with GradientTape() as tape:
        grads = tape.backward(loss())
    ctx = bank.context_tokens
    fd = central_diff(lambda: float(loss().item()), [ctx.data])
    assert rel_errors(grads[ctx], fd[0]).max() < 1e-3


def test_prompt_features_single_matches_batch():
    bank = make_bank()
    branch = TextBranch(bank, seed=4)
    perm = [3, 2, 1, 0]
    batch = branch.prompt_features(np.array([1, 0]), perm).numpy()
    single = branch.prompt_features_single(1, perm).numpy()
    np.testing.assert_allclose(batch[0], single, atol=1e-6)


def test_group_structured_table_correlations():
    kind = [0, 0, 1, 1, 2, 2]
    color = [3, 4, 3, 4, 3, 4]
    table = group_structured_table(kind, color, dim=32, seed=0)
    np.testing.assert_allclose(np.linalg.norm(table, axis=1), np.ones(6), atol=1e-6)
    same_kind = float(table[0] @ table[1])
    unrelated = float(table[0] @ table[3])
    assert same_kind > unrelated + 0.1


def test_embedding_file_round_trip(tmp_path):
    path = tmp_path / "classes.emb"
    names = ["red square", "blue circle"]
    rows = unit_rows(RNG, 2, 8) * 2.0  # deliberately unnormalized
    write_embedding_file(str(path), names, rows)
    got_names, got_rows = load_embedding_file(str(path))
    assert got_names == names
    np.testing.assert_allclose(np.linalg.norm(got_rows, axis=1), np.ones(2), atol=1e-6)
    np.testing.assert_allclose(got_rows, rows / np.linalg.norm(rows, axis=1, keepdims=True), atol=1e-6)


def test_embedding_file_bad_magic(tmp_path):
    path = tmp_path / "bad.emb"
    path.write_bytes(b"WRONGMAG" + b"\x00" * 12)
    with pytest.raises(DomainError):
        load_embedding_file(str(path))


def test_frozen_modes_context_not_trainable():
    for mode in ("random-frozen", "fixed-template"):
        cfg = PromptConfig(num_context=2, embed_dim=4, visual_dim=3, hidden_dim=4, mode=mode)
        table = unit_rows(np.random.default_rng(0), 3, 4)
        init = np.ones((2, 4), dtype=np.float32) if mode == "fixed-template" else None
        bank = PromptBank(cfg, table, seed=0, context_init=init)
        assert bank.context_tokens.requires_grad is False
        branch = TextBranch(bank, seed=0)
        assert "context_tokens" not in branch.trainable_parameters()
