"""Gradient-check cases shared by the unit tests and the acceptance suite.

A case builder takes an ``rng`` and returns ``(loss_fn, params)``: ``loss_fn()``
rebuilds the scalar loss from the current contents of ``params`` (a list of
leaf tensors), so the finite-difference oracle can perturb ``p.data`` in place.
"""

from __future__ import annotations

import numpy as np

from oracles import central_difference, rel_error

from sarlab import autograd as ag
from sarlab.biencoder import BiEncoder, ContrastiveBatch, EncoderConfig, contrastive_loss
from sarlab.distill import kd_feature_loss, kd_score_loss
from sarlab.gat import GatLayer, GatStack
from sarlab.graph import HeteroGraph
from sarlab.nn import TransformerLayer

MICRO = EncoderConfig(dim=4, layers=1, heads=2, ff_dim=6, dropout=0.0, chunk_len=3,
                      max_chunks=3, query_max_len=6, article_layers=1)


def _p(rng, *shape, scale=0.5):
    return ag.parameter(rng.normal(0.0, scale, size=shape))


def _weights(rng, shape):
    return ag.tensor(rng.normal(size=shape))


def _reduce(out, w):
    """Random linear functional so every output entry carries gradient."""
    return ag.sum(ag.mul(out, w))


def case_matmul(rng):
    a, b = _p(rng, 3, 4), _p(rng, 4, 2)
    w = _weights(rng, (3, 2))
    return lambda: _reduce(ag.matmul(a, b), w), [a, b]


def case_matvec(rng):
    a, v = _p(rng, 3, 4), _p(rng, 4)
    w = _weights(rng, (3,))
    return lambda: _reduce(ag.matmul(a, v), w), [a, v]


def case_transpose_dot(rng):
    a, b = _p(rng, 5), _p(rng, 5)
    c = _p(rng, 2, 3)
    w = _weights(rng, (3, 2))
    return lambda: ag.add(ag.dot(a, b), _reduce(ag.transpose(c), w)), [a, b, c]


def case_elementwise(rng):
    a, b = _p(rng, 3, 3), _p(rng, 3, 3)
    w = _weights(rng, (3, 3))
    return lambda: _reduce(ag.mul(ag.sub(ag.add(a, b), ag.scale(b, 0.3)), a), w), [a, b]


def case_bias_row(rng):
    a, bias, row = _p(rng, 4, 3), _p(rng, 3), _p(rng, 3)
    w = _weights(rng, (4, 3))
    return lambda: _reduce(ag.mul_row(ag.add_bias(a, bias), row), w), [a, bias, row]


def case_leaky_gelu(rng):
    a = _p(rng, 4, 5)
    w = _weights(rng, (4, 5))
    return lambda: _reduce(ag.add(ag.leaky_relu(a, 0.2), ag.gelu(a)), w), [a]


def case_exp_log_clamp(rng):
    a = ag.parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
    w = _weights(rng, (3, 4))
    return lambda: _reduce(ag.add(ag.log(a), ag.clamp_min(ag.exp(ag.scale(a, -1.0)), 0.05)), w), [a]


def case_dropout(rng):
    a = _p(rng, 4, 6)
    w = _weights(rng, (4, 6))
    seed = int(rng.integers(1 << 30))
    return lambda: _reduce(ag.dropout(a, 0.3, np.random.default_rng(seed), True), w), [a]


def case_reductions(rng):
    a, b = _p(rng, 4, 3), _p(rng, 6)
    return lambda: ag.add(ag.add(ag.mean(a), ag.sq_norm(a)), ag.l2_norm(b)), [a, b]


def case_maxpool(rng):
    a = _p(rng, 5, 4)
    w = _weights(rng, (4,))
    return lambda: _reduce(ag.maxpool_rows(a), w), [a]


def case_structural(rng):
    a, b, c = _p(rng, 2, 3), _p(rng, 4, 3), _p(rng, 3)
    w = _weights(rng, (7, 3))
    idx = rng.integers(0, 6, size=5)
    w2 = _weights(rng, (5, 3))

    def loss():
        cat = ag.concat([a, b], axis=0)
        st = ag.concat([cat, ag.stack([c])], axis=0)
        picked = ag.pick(cat, np.array([0, 3, 5]), np.array([2, 0, 1]))
        return ag.add(ag.add(_reduce(st, w), _reduce(ag.take_rows(cat, idx), w2)),
                      ag.add(ag.sum(picked), ag.sum(ag.row(b, 2))))

    return loss, [a, b, c]


def case_concat_columns(rng):
    a, b = _p(rng, 3, 2), _p(rng, 3, 4)
    w = _weights(rng, (3, 6))
    return lambda: _reduce(ag.concat([a, b], axis=1), w), [a, b]


def case_segments(rng):
    a = _p(rng, 7, 3)
    seg = np.array([0, 0, 1, 2, 2, 2, 1])
    w = _weights(rng, (7, 3))
    w2 = _weights(rng, (3, 3))
    return lambda: ag.add(_reduce(ag.segment_softmax(a, seg, 3), w),
                          _reduce(ag.segment_sum(a, seg, 3), w2)), [a]


def case_softmaxes(rng):
    a = _p(rng, 3, 5)
    mask = rng.random((3, 5)) < 0.7
    mask[:, 0] = True
    w = _weights(rng, (3, 5))
    w2 = _weights(rng, (3, 5))
    return lambda: ag.add(_reduce(ag.row_softmax(a), w),
                          _reduce(ag.masked_log_softmax(a, mask), w2)), [a]


def case_layer_norm(rng):
    a, g, b = _p(rng, 3, 5), _p(rng, 5), _p(rng, 5)
    w = _weights(rng, (3, 5))
    return lambda: _reduce(ag.layer_norm(a, g, b), w), [a, g, b]


def case_attention(rng):
    q, k, v = _p(rng, 4, 6), _p(rng, 4, 6), _p(rng, 4, 6)
    w = _weights(rng, (4, 6))
    return lambda: _reduce(ag.multihead_attention(q, k, v, 2), w), [q, k, v]


def case_transformer_layer(rng):
    layer = TransformerLayer(4, 2, 6, 0.0, rng)
    x = _p(rng, 3, 4)
    w = _weights(rng, (3, 4))
    return lambda: _reduce(layer(x), w), [x, *layer.named_parameters().values()]


def _micro_model(rng):
    model = BiEncoder(MICRO, 9, rng)
    # move off the zero initialisation so every parameter carries gradient
    for p in model.named_parameters().values():
        p.data += rng.normal(0.0, 0.3, size=p.shape)
    return model


def case_query_encoder(rng):
    model = _micro_model(rng)
    tokens = list(rng.integers(2, 9, size=4))
    w = _weights(rng, (MICRO.dim,))
    params = [model.token_embedding, *model.query_parameters().values()]
    return lambda: _reduce(model.encode_query(tokens), w), params


def case_article_encoder(rng):
    model = _micro_model(rng)
    tokens = list(rng.integers(2, 9, size=7))
    w = _weights(rng, (MICRO.dim,))
    return lambda: _reduce(model.encode_article(tokens), w), list(model.article_parameters().values())


def _batch():
    # two queries; the first has two positives, candidates 0..4
    pair_mask = np.array([[1, 0, 1, 1, 1], [0, 1, 1, 1, 1], [1, 1, 1, 0, 1]], dtype=bool)
    return ContrastiveBatch(["q0", "q1"], ["a0", "a1", "a2", "a3", "a4"],
                            np.array([0, 0, 1]), np.array([0, 1, 3]), pair_mask,
                            np.ones((2, 5), dtype=bool))


def case_contrastive(rng):
    q, a = _p(rng, 2, 4), _p(rng, 5, 4)
    batch = _batch()
    return lambda: contrastive_loss(q, a, batch, tau=0.7), [q, a]


def case_contrastive_end_to_end(rng):
    model = _micro_model(rng)
    q_tokens = [list(rng.integers(2, 9, size=3)) for _ in range(2)]
    a_tokens = [list(rng.integers(2, 9, size=int(rng.integers(2, 6)))) for _ in range(5)]
    batch = _batch()

    def loss():
        qm = ag.stack([model.encode_query(t) for t in q_tokens])
        am = ag.stack([model.encode_article(t) for t in a_tokens])
        return contrastive_loss(qm, am, batch)

    return loss, list(model.named_parameters().values())


def _random_graph(rng, n=6):
    edges = []
    for u in range(n):
        for v in range(u + 1, n):
            if rng.random() < 0.4:
                edges.append((u, v, int(rng.integers(1, 6))))
    return HeteroGraph([f"n{i}" for i in range(n)], ["article"] * n, edges)


def case_gat_layer(rng):
    layer = GatLayer(4, 2, 2, rng, residual=True, init_std=0.5)
    g = _random_graph(rng)
    x = _p(rng, len(g), 4)
    w = _weights(rng, (len(g), 4))
    params = [x, layer.W_s, layer.W_t, layer.W_e, layer.a_s, layer.a_t, layer.a_e,
              layer.edge_embedding]
    return lambda: _reduce(layer(x, g.adjacency()), w), params


def case_gat_stack_readout(rng):
    stack = GatStack(4, layers=2, heads=2, rng=rng, init_std=0.5)
    g = _random_graph(rng)
    x = _p(rng, len(g), 4)
    w = _weights(rng, (2, 4))
    return (lambda: _reduce(stack.readouts(g, x, [0, 3]), w),
            [x, *stack.named_parameters().values()])


def case_kd_score(rng):
    student = _p(rng, 3, 5)
    teacher = rng.normal(size=(3, 5))
    mask = rng.random((3, 5)) < 0.8
    mask[:, :2] = True
    return lambda: kd_score_loss(teacher, student, mask), [student]


def case_kd_feature(rng):
    qb = _p(rng, 3, 4)
    qg = rng.normal(size=(3, 4))
    return lambda: kd_feature_loss(qb, qg), [qb]


CASES = {name[5:]: fn for name, fn in sorted(globals().items()) if name.startswith("case_")}
STEP = 1e-5
ROUNDOFF = 64 * np.finfo(float).eps
EXPENSIVE = {"contrastive_end_to_end", "article_encoder", "gat_stack_readout",
             "transformer_layer", "query_encoder"}


def check_case(name, seed, max_coords=12):
    """Worst relative error between the tape gradient and central differences.

    Cheap cases check up to ``max_coords`` random coordinates of every
    parameter; the expensive end-to-end cases check ``max_coords`` random
    coordinates drawn across all their parameters.
    """
    rng = np.random.default_rng(seed)
    loss_fn, params = CASES[name](rng)
    for p in params:
        p.grad = None
    ag.backward(loss_fn())
    if name in EXPENSIVE:
        sizes = np.array([p.data.size for p in params])
        owners = rng.choice(len(params), size=max_coords, p=sizes / sizes.sum())
        picks = [(params[o], int(rng.integers(params[o].data.size))) for o in owners]
    else:
        picks = []
        for p in params:
            coords = rng.choice(p.data.size, size=min(max_coords, p.data.size), replace=False)
            picks += [(p, int(c)) for c in coords]
    # central differences cannot resolve anything below their round-off
    # level, so a coordinate where both values sit under it agrees
    floor = ROUNDOFF * max(abs(loss_fn().item()), 1.0) / STEP
    worst = 0.0
    for p, c in picks:
        flat = p.data.reshape(-1)
        # ``box`` is a view into ``p.data`` so the perturbation reaches the loss
        box = flat[c:c + 1]
        (num,) = central_difference(lambda: loss_fn().item(), [box], STEP)
        a = 0.0 if p.grad is None else p.grad.reshape(-1)[c]
        if max(abs(a), abs(num[0])) < floor:
            continue
        worst = max(worst, rel_error(a, num[0]))
    return worst
