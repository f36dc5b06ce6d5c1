"""Look inside the graph teacher on a small generated corpus.

    python demos/graph_teacher.py

Builds the query/article/structure graph from the training queries, prints
the edge-type counts, then follows one training query: its neighbourhood,
the attention a freshly initialised GAT layer puts on each neighbour, and the
fact that a two-hop subgraph around the query reproduces the full-graph
output exactly.
"""

import numpy as np

from sarlab import autograd as ag
from sarlab.biencoder import EncoderConfig, Stage1Config, stage1_train
from sarlab.distill import init_node_features
from sarlab.gat import GatLayer, GatStack
from sarlab.graph import EDGE_TYPES, build_graph, query_key, sample_subgraph
from sarlab.synthetic import SyntheticSpec, generate_synthetic

spec = SyntheticSpec(n_topics=2, articles_per_topic=12, n_train=16, n_val=4, n_test=4,
                     concepts_per_topic=4, topic_words=10, common_words=20, background_words=40)
corpus, queries, split = generate_synthetic(spec, seed=11)
train = split.select(queries, "train")
graph = build_graph(corpus, train)

print(f"{len(graph)} nodes, {len(graph.edges)} edges")
for name, count in sorted(graph.edge_type_histogram().items()):
    print(f"  {name:<22}{count:>5}")

# a small stage-1 encoder supplies the initial node features
encoder = EncoderConfig(dim=16, layers=1, heads=2, ff_dim=32, chunk_len=16, article_layers=1)
model = stage1_train(corpus, train, split.select(queries, "validation"), encoder,
                     Stage1Config(epochs=2, batch_size=8), seed=0).model
feats = init_node_features(graph, model, corpus, {q.id: q for q in train})

q = train[0]
qi = graph.index[query_key(q.id)]
print(f"\nquery {q.id}: {q.text!r}")
print(f"relevant articles: {', '.join(q.relevant_article_ids)}")

layer = GatLayer(16, heads=2, head_dim=8, rng=np.random.default_rng(0), init_std=0.5)
adj = graph.adjacency()
alpha = layer.attention(ag.tensor(feats), adj).data
rows = np.flatnonzero(adj.center == qi)
print("attention from the query node (two heads):")
for r in rows:
    j = int(adj.member[r])
    etype = "self" if j == qi else EDGE_TYPES[graph.edge_type_between(qi, j)]
    print(f"  {graph.node_keys[j]:<28}{etype:<22}{alpha[r, 0]:.3f}  {alpha[r, 1]:.3f}")
print(f"  column sums: {alpha[rows].sum(axis=0).round(12)}")

stack = GatStack(16, layers=2, heads=2, rng=np.random.default_rng(1), init_std=0.5)
sub = sample_subgraph(graph, [qi], stack.hops)
local = stack(sub.graph, feats[sub.nodes]).data[sub.local_seeds[0]]
full = stack(graph, feats).data[qi]
print(f"\ntwo-hop subgraph: {len(sub.nodes)} of {len(graph)} nodes; "
      f"query output identical to full graph: {np.array_equal(local, full)}")
