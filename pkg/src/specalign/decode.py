"""Draft-and-verify decoding with chain or dynamic-tree drafting.

Per cycle the draft proposes candidate tokens (self-conditioning on its own
regress features), the target verifies them in one forward pass over a
tree-structured attention mask, and a bonus token (the target's own next
prediction after the accepted prefix) is always appended. Greedy acceptance
reproduces the target's greedy stream token for token; sampling acceptance
uses the accept/residual scheme so the emitted marginal equals the target
distribution exactly.

The toy engine recomputes full forwards every cycle (no KV cache); latency is
modeled analytically from pass counts elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import NEG_INF
from .draft import DraftModel, DraftOutput
from .target import TargetModel, softmax_np


@dataclass
class ChainStep:
    token: int
    feature: np.ndarray        # regress feature paired at this token's position
    dist: np.ndarray           # draft distribution the token was drawn from


@dataclass
class TreeNode:
    token: int
    parent: int                # node index; -1 means the context root
    depth: int                 # 1-based
    logp: float                # log draft prob of this token at its parent
    cum_logp: float            # parent cum_logp + logp
    feature: np.ndarray        # regress feature paired at this node's position
    draw_q: float = 0.0        # prob under the renormalized dist at draw time (sampling)
    q_dist: np.ndarray | None = None   # draft dist over this node's children; set on expansion
    children: list[int] = field(default_factory=list)


@dataclass
class DraftTree:
    nodes: list[TreeNode]
    root_dist: np.ndarray      # draft distribution at the context end
    budget: int
    max_depth: int
    draft_passes: int = 1      # forwards spent growing this tree

    def __len__(self) -> int:
        return len(self.nodes)

    def roots(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.parent == -1]

    def validate(self) -> None:
        if len(self.nodes) > self.budget:
            raise AssertionError("tree exceeds its node budget")
        groups: dict[int, list[int]] = {}
        for i, node in enumerate(self.nodes):
            if node.depth > self.max_depth:
                raise AssertionError("tree exceeds its depth limit")
            if node.parent >= i:
                raise AssertionError("parents must precede children")
            parent_cum = 0.0 if node.parent == -1 else self.nodes[node.parent].cum_logp
            if abs(node.cum_logp - (parent_cum + node.logp)) > 1e-9:
                raise AssertionError("cumulative log-prob mismatch")
            groups.setdefault(node.parent, []).append(node.token)
        for sibling_tokens in groups.values():
            if len(sibling_tokens) != len(set(sibling_tokens)):
                raise AssertionError("children of a node must carry distinct tokens")


@dataclass
class CycleMetrics:
    accepted: int              # accepted draft tokens, bonus excluded
    tau: int                   # accepted + 1 (the bonus token)
    draft_passes: int
    target_passes: int = 1


@dataclass
class Verification:
    accepted_indices: list[int]
    accepted_tokens: list[int]
    bonus_token: int
    context_features: np.ndarray   # fresh target features for the context
    path_features: np.ndarray      # target features at the accepted nodes


@dataclass
class DecodeResult:
    tokens: list[int]
    metrics: list[CycleMetrics]
    trace: list[dict] | None = None

    @property
    def mean_tau(self) -> float:
        return float(np.mean([m.tau for m in self.metrics])) if self.metrics else 0.0


# ---------------------------------------------------------------------------
# Drafting
# ---------------------------------------------------------------------------


def _draft_dist(logits: np.ndarray, temperature: float) -> np.ndarray:
    if temperature > 0:
        return softmax_np(logits / temperature)
    return softmax_np(logits)


def _pick_token(dist: np.ndarray, temperature: float, rng) -> int:
    if temperature > 0:
        return int(rng.choice(dist.size, p=dist))
    return int(np.argmax(dist))


def draft_chain(draft: DraftModel, context_tokens, context_features, depth: int,
                temperature: float = 0.0, rng=None) -> list[ChainStep]:
    """Self-conditioned chain of `depth` tokens; one draft forward per step.

    Greedy by default; with temperature > 0 tokens are sampled from the
    draft's softmax. Step i consumes step i-1's token and regress feature.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    tokens = list(context_tokens)
    if not tokens:
        raise ValueError("context must be non-empty")
    feats = np.asarray(context_features, dtype=np.float64)
    steps: list[ChainStep] = []
    for _ in range(depth):
        out = draft.forward(tokens, feats)
        dist = _draft_dist(draft.draft_logits(out.predict_features[-1]), temperature)
        token = _pick_token(dist, temperature, rng)
        feature = out.regress_features[-1]
        steps.append(ChainStep(token=token, feature=feature, dist=dist))
        tokens.append(token)
        feats = np.vstack([feats, feature[None, :]])
    return steps


def heal_trailing_feature(draft: DraftModel, context_tokens, context_features) -> np.ndarray:
    """Regress feature for the newest context token (its target feature is
    only computed by the next verification pass)."""
    tokens = list(context_tokens)
    feats = np.asarray(context_features, dtype=np.float64)
    if len(tokens) - feats.shape[0] != 1:
        raise ValueError("context features must be exactly one position short")
    out = draft.forward(tokens[:-1], feats)
    return out.regress_features[-1]


def chain_to_tree(steps: list[ChainStep], budget: int, max_depth: int) -> DraftTree:
    """Represent a drafted chain as a single-branch tree for verification."""
    nodes = []
    cum = 0.0
    for i, step in enumerate(steps):
        logp = float(np.log(max(step.dist[step.token], 1e-300)))
        cum += logp
        nodes.append(TreeNode(token=step.token, parent=i - 1, depth=i + 1, logp=logp,
                              cum_logp=cum, feature=step.feature,
                              draw_q=float(step.dist[step.token])))
        if i > 0:
            nodes[i - 1].children.append(i)
    for i in range(len(steps) - 1):
        nodes[i].q_dist = steps[i + 1].dist
    return DraftTree(nodes=nodes, root_dist=steps[0].dist, budget=max(budget, len(nodes)),
                     max_depth=max(max_depth, len(nodes)))


def _tree_positions_bias(context_len: int, nodes: list[TreeNode]) -> tuple[np.ndarray, np.ndarray]:
    """Positions and attention bias for [context + tree nodes].

    A node attends the whole context, its ancestors, and itself; its rotary
    position is where it would sit in its own root path.
    """
    c, n = context_len, len(nodes)
    total = c + n
    positions = np.concatenate([np.arange(c), [c + node.depth - 1 for node in nodes]])
    bias = np.full((total, total), NEG_INF)
    bias[:c, :c] = np.triu(np.full((c, c), NEG_INF), k=1)
    for i, node in enumerate(nodes):
        row = c + i
        bias[row, :c] = 0.0
        j = i
        while j != -1:
            bias[row, c + j] = 0.0
            j = nodes[j].parent
    return positions, bias


def draft_tree(draft: DraftModel, context_tokens, context_features, budget: int = 60,
               max_depth: int = 6, branch_k: int = 3, temperature: float = 0.0,
               rng=None) -> DraftTree:
    """Grow a candidate tree level by level with one draft forward per level.

    Greedy mode proposes each frontier node's top branch_k children, then
    globally re-ranks every node by cumulative path log-prob and prunes to
    the budget (stable order, so ancestors always survive with their
    descendants). Sampling mode draws children sequentially without
    replacement and spends the budget on the highest-scoring expansions
    without deleting drafted nodes, which keeps sibling sets distributed the
    way the verifier assumes.
    """
    if budget < 1 or max_depth < 1 or branch_k < 1:
        raise ValueError("budget, max_depth and branch_k must be >= 1")
    tokens = list(context_tokens)
    if not tokens:
        raise ValueError("context must be non-empty")
    feats = np.asarray(context_features, dtype=np.float64)
    out = draft.forward(tokens, feats)
    root_dist = _draft_dist(draft.draft_logits(out.predict_features[-1]), temperature)
    root_regress = out.regress_features[-1]

    nodes: list[TreeNode] = []
    if temperature > 0:
        level_passes = _grow_sampled(draft, tokens, feats, nodes, root_dist, root_regress,
                                     budget, max_depth, branch_k, temperature, rng)
    else:
        level_passes = _grow_greedy(draft, tokens, feats, nodes, root_dist, root_regress,
                                    budget, max_depth, branch_k)
    tree = DraftTree(nodes=nodes, root_dist=root_dist, budget=budget, max_depth=max_depth)
    tree.draft_passes = 1 + level_passes
    return tree


def _frontier_outputs(draft: DraftModel, tokens, feats, nodes) -> DraftOutput:
    """One forward over [context + nodes] with the tree mask."""
    ids = list(tokens) + [n.token for n in nodes]
    node_feats = np.vstack([feats] + [n.feature[None, :] for n in nodes])
    positions, bias = _tree_positions_bias(len(tokens), nodes)
    return draft.forward_custom(ids, node_feats, positions, bias)


def _grow_greedy(draft, tokens, feats, nodes, root_dist, root_regress,
                 budget, max_depth, branch_k) -> int:
    c = len(tokens)
    passes = 0

    def top_children(dist, parent_idx, parent_cum, feature):
        order = np.lexsort((np.arange(dist.size), -dist))[:branch_k]
        out = []
        for tok in order:
            logp = float(np.log(max(dist[tok], 1e-300)))
            out.append(TreeNode(token=int(tok), parent=parent_idx, depth=1 if parent_idx == -1
                                else nodes[parent_idx].depth + 1, logp=logp,
                                cum_logp=parent_cum + logp, feature=feature,
                                draw_q=float(dist[tok])))
        return out

    candidates = top_children(root_dist, -1, 0.0, root_regress)
    frontier = _prune_to_budget(nodes, candidates, budget)
    depth = 1
    while frontier and depth < max_depth and len(nodes) < budget:
        out = _frontier_outputs(draft, tokens, feats, nodes)
        passes += 1
        candidates = []
        for idx in frontier:
            slot = c + idx
            dist = _draft_dist(draft.draft_logits(out.predict_features[slot]), 0.0)
            nodes[idx].q_dist = dist
            candidates.extend(top_children(dist, idx, nodes[idx].cum_logp,
                                           out.regress_features[slot]))
        frontier = _prune_to_budget(nodes, candidates, budget)
        depth += 1
    return passes


def _prune_to_budget(nodes: list[TreeNode], candidates: list[TreeNode], budget: int) -> list[int]:
    """Keep the top-budget of existing + candidate nodes by cumulative
    log-prob (stable), rebuild indices, and return surviving candidate ids.

    A child's cumulative log-prob never exceeds its parent's, and the stable
    order lists parents first, so the kept set is always ancestry-closed.
    """
    combined = nodes + candidates
    order = sorted(range(len(combined)), key=lambda i: -combined[i].cum_logp)
    keep = sorted(order[:budget])
    remap = {old: new for new, old in enumerate(keep)}
    survivors = [combined[old] for old in keep]
    for node in survivors:
        node.children = []
    for new_idx, old_idx in enumerate(keep):
        node = survivors[new_idx]
        if old_idx >= len(nodes):  # candidate: parent was an existing node
            node.parent = remap[node.parent] if node.parent != -1 else -1
        elif node.parent != -1:
            node.parent = remap[node.parent]
        if node.parent != -1:
            survivors[node.parent].children.append(new_idx)
    new_frontier = [remap[i] for i in range(len(nodes), len(combined)) if i in remap]
    nodes[:] = survivors
    return new_frontier


def _grow_sampled(draft, tokens, feats, nodes, root_dist, root_regress,
                  budget, max_depth, branch_k, temperature, rng) -> int:
    if rng is None:
        raise ValueError("sampling-mode tree growth needs an rng")
    c = len(tokens)
    passes = 0

    def draw_children(dist, parent_idx, parent_cum, feature, room):
        remaining = dist.copy()
        out = []
        for _ in range(min(branch_k, room)):
            total = remaining.sum()
            if total <= 0:
                break
            renorm = remaining / total
            tok = int(rng.choice(renorm.size, p=renorm))
            logp = float(np.log(max(dist[tok], 1e-300)))
            out.append(TreeNode(token=tok, parent=parent_idx, depth=1 if parent_idx == -1
                                else nodes[parent_idx].depth + 1, logp=logp,
                                cum_logp=parent_cum + logp, feature=feature,
                                draw_q=float(renorm[tok])))
            remaining[tok] = 0.0
        return out

    first = draw_children(root_dist, -1, 0.0, root_regress, budget)
    for node in first:
        nodes.append(node)
    frontier = list(range(len(first)))
    depth = 1
    while frontier and depth < max_depth and len(nodes) < budget:
        out = _frontier_outputs(draft, tokens, feats, nodes)
        passes += 1
        expansions = sorted(frontier, key=lambda i: -nodes[i].cum_logp)
        frontier = []
        for idx in expansions:
            room = budget - len(nodes)
            if room <= 0:
                break
            slot = c + idx
            dist = _draft_dist(draft.draft_logits(out.predict_features[slot]), temperature)
            nodes[idx].q_dist = dist
            children = draw_children(dist, idx, nodes[idx].cum_logp,
                                     out.regress_features[slot], room)
            for child in children:
                nodes[idx].children.append(len(nodes))
                frontier.append(len(nodes))
                nodes.append(child)
        depth += 1
    return passes


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------


def target_tree_forward(target: TargetModel, context_tokens, tree: DraftTree):
    """One batched target forward over [context + tree]; returns per-slot
    logits and features split into context and node parts."""
    ids = list(context_tokens) + [n.token for n in tree.nodes]
    positions, bias = _tree_positions_bias(len(context_tokens), tree.nodes)
    out = target.forward_custom(ids, positions, bias)
    c = len(context_tokens)
    return (out.logits[:c], out.logits[c:], out.features[:c], out.features[c:])


def acceptance_probability(p: np.ndarray, q: np.ndarray, token: int) -> float:
    """min(1, p(token)/q(token)); the draft never proposes q(token)=0 tokens."""
    if q[token] <= 0:
        return 0.0
    return float(min(1.0, p[token] / q[token]))


def residual_distribution(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Normalized max(0, p - q); the rejection fallback distribution."""
    r = np.maximum(p - q, 0.0)
    s = r.sum()
    if s <= 0.0:  # unreachable with exact arithmetic: rejection implies p != q
        return p.copy()
    return r / s


def verify_greedy(target: TargetModel, context_tokens, tree: DraftTree) -> Verification:
    """Longest root path matching the target's argmax at every step, plus the
    target's own next token (bonus) after the accepted path."""
    ctx_logits, node_logits, ctx_feats, node_feats = target_tree_forward(
        target, context_tokens, tree)
    current = tree.roots()
    dist_logits = ctx_logits[-1]
    accepted: list[int] = []
    while True:
        want = int(np.argmax(dist_logits))
        match = next((i for i in current if tree.nodes[i].token == want), None)
        if match is None:
            bonus = want
            break
        accepted.append(match)
        dist_logits = node_logits[match]
        current = tree.nodes[match].children
    return Verification(
        accepted_indices=accepted,
        accepted_tokens=[tree.nodes[i].token for i in accepted],
        bonus_token=bonus,
        context_features=ctx_feats,
        path_features=node_feats[accepted] if accepted else np.zeros((0, ctx_feats.shape[1])),
    )


def verify_greedy_sequential(target: TargetModel, context_tokens,
                             tree: DraftTree) -> Verification:
    """Per-path fallback for greedy verification: one plain target forward per
    accepted step instead of the batched tree pass. Same acceptance rule; kept
    as the slow reference the batched path is checked against."""
    tokens = list(context_tokens)
    current = tree.roots()
    accepted: list[int] = []
    while True:
        out = target.forward(tokens)
        want = int(np.argmax(out.logits[-1]))
        match = next((i for i in current if tree.nodes[i].token == want), None)
        if match is None:
            bonus = want
            break
        accepted.append(match)
        tokens.append(want)
        current = tree.nodes[match].children
    ctx_out = target.forward(list(context_tokens) + [tree.nodes[i].token for i in accepted])
    c = len(context_tokens)
    return Verification(
        accepted_indices=accepted,
        accepted_tokens=[tree.nodes[i].token for i in accepted],
        bonus_token=bonus,
        context_features=ctx_out.features[:c],
        path_features=ctx_out.features[c:],
    )


def verify_sampling(target: TargetModel, context_tokens, tree: DraftTree,
                    temperature: float, rng) -> Verification:
    """Multi-branch stochastic acceptance.

    Walk the tree: a child drawn with (without-replacement-renormalized)
    probability q is accepted with min(1, p/q); each rejection updates the
    target residual max(0, p - q)+ and removes the sibling from the draft
    mass. If every sibling is rejected the correction token is sampled from
    the final residual, which makes the emitted marginal exactly the target
    distribution. Temperature <= 0 routes to greedy verification.
    """
    if temperature <= 0:
        return verify_greedy(target, context_tokens, tree)
    ctx_logits, node_logits, ctx_feats, node_feats = target_tree_forward(
        target, context_tokens, tree)
    p = softmax_np(ctx_logits[-1] / temperature)
    parent_dist = tree.root_dist
    current = tree.roots()
    accepted: list[int] = []
    while True:
        if not current or parent_dist is None:
            bonus = int(rng.choice(p.size, p=p))
            break
        qq = parent_dist.copy()
        r = p.copy()
        chosen = None
        for idx in current:
            tok = tree.nodes[idx].token
            remaining = qq.sum()
            if remaining <= 0:  # drawn siblings exhausted the draft mass
                break
            q_j = qq / remaining
            if rng.random() < acceptance_probability(r, q_j, tok):
                chosen = idx
                break
            r = residual_distribution(r, q_j)
            qq[tok] = 0.0
        if chosen is None:
            bonus = int(rng.choice(r.size, p=r))
            break
        accepted.append(chosen)
        p = softmax_np(node_logits[chosen] / temperature)
        parent_dist = tree.nodes[chosen].q_dist
        current = tree.nodes[chosen].children
    return Verification(
        accepted_indices=accepted,
        accepted_tokens=[tree.nodes[i].token for i in accepted],
        bonus_token=bonus,
        context_features=ctx_feats,
        path_features=node_feats[accepted] if accepted else np.zeros((0, ctx_feats.shape[1])),
    )


# ---------------------------------------------------------------------------
# Decode session
# ---------------------------------------------------------------------------


def autoregressive_generate(target: TargetModel, prompt, n_tokens: int,
                            temperature: float = 0.0, rng=None) -> list[int]:
    """Plain one-token-at-a-time target decoding (the lossless reference)."""
    tokens = list(prompt)
    out: list[int] = []
    for _ in range(n_tokens):
        if temperature > 0:
            tok = target.sample_next(tokens, temperature, rng)
        else:
            tok = target.greedy_next(tokens)
        out.append(tok)
        tokens.append(tok)
    return out


def speculative_generate(target: TargetModel, draft: DraftModel, prompt,
                         n_tokens: int, mode: str = "chain", temperature: float = 0.0,
                         rng=None, depth: int = 6, budget: int = 60, max_depth: int = 6,
                         branch_k: int = 3, collect_trace: bool = False) -> DecodeResult:
    """Full draft-and-verify decoding of `n_tokens` tokens.

    The first cycle drafts from target features computed by a prefill pass;
    afterwards only the newest (bonus) position lacks a target feature and is
    healed with one draft regress pass. One target pass per cycle.
    """
    if mode not in ("chain", "tree"):
        raise ValueError("mode must be chain|tree")
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    room = depth if mode == "chain" else budget
    limit = len(prompt) + n_tokens + room + 1
    if limit > target.config.max_seq:
        raise ValueError(
            f"prompt + n_tokens + draft room = {limit} exceeds target max_seq "
            f"{target.config.max_seq}")
    if temperature > 0 and rng is None:
        raise ValueError("sampling decode needs an rng")

    tokens = list(prompt)
    feats = target.forward(tokens).features
    produced: list[int] = []
    metrics: list[CycleMetrics] = []
    trace: list[dict] | None = [] if collect_trace else None
    cycle = 0
    while len(produced) < n_tokens:
        draft_passes = 0
        if feats.shape[0] < len(tokens):
            healed = heal_trailing_feature(draft, tokens, feats)
            feats = np.vstack([feats, healed[None, :]])
            draft_passes += 1
        if mode == "chain":
            steps = draft_chain(draft, tokens, feats, depth, temperature, rng)
            draft_passes += len(steps)
            tree = chain_to_tree(steps, budget=depth, max_depth=depth)
        else:
            tree = draft_tree(draft, tokens, feats, budget=budget, max_depth=max_depth,
                              branch_k=branch_k, temperature=temperature, rng=rng)
            draft_passes += tree.draft_passes
        if temperature > 0:
            outcome = verify_sampling(target, tokens, tree, temperature, rng)
        else:
            outcome = verify_greedy(target, tokens, tree)
        accepted = outcome.accepted_tokens
        metrics.append(CycleMetrics(accepted=len(accepted), tau=len(accepted) + 1,
                                    draft_passes=draft_passes))
        if trace is not None:
            trace.append({
                "cycle": cycle,
                "context_len": len(tokens),
                "draft_tokens": [n.token for n in tree.nodes],
                "draft_parents": [n.parent for n in tree.nodes],
                "accepted": list(accepted),
                "bonus": outcome.bonus_token,
                "tau": len(accepted) + 1,
            })
        feats = np.vstack([outcome.context_features, outcome.path_features])
        tokens.extend(accepted)
        tokens.append(outcome.bonus_token)
        produced.extend(accepted)
        produced.append(outcome.bonus_token)
        cycle += 1
    return DecodeResult(tokens=produced[:n_tokens], metrics=metrics, trace=trace)


# ---------------------------------------------------------------------------
# Misalignment probe
# ---------------------------------------------------------------------------


def misalignment_probe(draft: DraftModel, target: TargetModel, corpus: list[list[int]],
                       forwards: int, windows_per_seq: int = 3,
                       min_prefix: int = 4) -> np.ndarray:
    """Teacher-forced self-conditioning probe.

    From ground-truth prefixes, run `forwards` chained draft passes and record
    at each pass whether the drafted token differs from the corpus token at
    that position. Returns the mismatch rate per forward index (length F);
    index 0 is exactly 1 - top-1 teacher-forced accuracy.
    """
    if forwards < 1:
        raise ValueError("forwards must be >= 1")
    mism = np.zeros(forwards)
    count = 0
    for seq in corpus:
        if len(seq) < min_prefix + forwards:
            continue
        feats = target.forward(seq).features
        cuts = np.linspace(min_prefix, len(seq) - forwards, num=windows_per_seq, dtype=int)
        for c in sorted(set(int(x) for x in cuts)):
            steps = draft_chain(draft, seq[:c], feats[:c], forwards)
            for i, step in enumerate(steps):
                mism[i] += float(step.token != seq[c + i])
            count += 1
    if count == 0:
        raise ValueError("no usable probe windows; sequences too short")
    return mism / count
