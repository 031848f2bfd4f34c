//! Mixture-of-experts layer: sigmoid affinities, top-K routing with
//! normalized gates, bias-based load balancing that touches only the
//! selection (never the gate values), node-limited routing, the auxiliary
//! balance loss, and the relative-load diagnostics.

use rand::Rng;

use crate::fp8::LinearMode;
use crate::tensor::{Param, Tape, Tensor};
use crate::{Error, Result};

/// Expert-layer dimensions.
#[derive(Debug, Clone, Copy)]
pub struct ExpertConfig {
    /// Always-active shared experts `N_s`.
    pub shared_experts: usize,
    /// Routed experts `N_r`.
    pub routed_experts: usize,
    /// Routed experts activated per token `K_r`.
    pub active_experts: usize,
    /// Model width `d`.
    pub embed_dim: usize,
    /// Expert hidden width `d_ff`.
    pub ffn_dim: usize,
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.active_experts < 1 || self.active_experts > self.routed_experts {
            return Err(Error::Routing(format!(
                "need 1 <= K_r <= N_r, got K_r={} N_r={}",
                self.active_experts, self.routed_experts
            )));
        }
        if self.embed_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Routing("zero layer dimension".into()));
        }
        Ok(())
    }
}

/// Router state: trainable centroids plus the non-gradient bias terms and
/// their update speed. Biases influence which experts are selected but
/// never the gate values.
pub struct RouterState {
    pub centroids: Param,
    pub biases: Vec<f64>,
    /// Bias update speed (gamma).
    pub gamma: f64,
}

impl RouterState {
    pub fn init<R: Rng>(cfg: &ExpertConfig, std: f64, gamma: f64, rng: &mut R) -> Self {
        Self {
            centroids: Param::new(Tensor::randn(
                &[cfg.routed_experts, cfg.embed_dim],
                std,
                rng,
            )),
            biases: vec![0.0; cfg.routed_experts],
            gamma,
        }
    }

    /// Token-to-expert affinities `sigmoid(u . e_i)` for one token.
    pub fn affinity(&self, u: &Tensor, tape: Option<&Tape>) -> Result<Tensor> {
        let n = self.biases.len();
        Ok(self.centroids.read(tape).matvec(u)?.sigmoid().reshape(&[n])?)
    }

    /// Affinity matrix `[T, N_r]` for a batch of token features.
    pub fn affinity_batch(&self, us: &Tensor, tape: Option<&Tape>) -> Result<Tensor> {
        Ok(us
            .matmul(&self.centroids.read(tape).transpose()?)?
            .sigmoid())
    }
}

/// Per-token routing outcome. `experts[i]` pairs with `gates` row `i`;
/// gates of selected experts sum to 1, unselected experts have gate 0.
#[derive(Clone)]
pub struct RoutingDecision {
    pub experts: Vec<usize>,
    /// `[K_r]`, differentiable back to the affinities.
    pub gates: Tensor,
    /// Raw affinities `[N_r]` this decision was made from.
    pub affinities: Tensor,
}

/// Ranks `scores` descending with lowest-index tie-break and returns the
/// top `k` indices restricted to `allowed`.
fn top_k_indices(scores: &[f64], k: usize, allowed: Option<&[bool]>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len())
        .filter(|&i| allowed.map_or(true, |a| a[i]))
        .collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Top-K selection by `s_i (+ b_i)` with gate values computed from the raw
/// affinities only (the bias steers selection, not weighting).
pub fn route(
    affinities: &Tensor,
    state: &RouterState,
    cfg: &ExpertConfig,
    use_bias: bool,
) -> Result<RoutingDecision> {
    cfg.validate()?;
    route_restricted(affinities, state, cfg, use_bias, None)
}

fn route_restricted(
    affinities: &Tensor,
    state: &RouterState,
    cfg: &ExpertConfig,
    use_bias: bool,
    allowed: Option<&[bool]>,
) -> Result<RoutingDecision> {
    let n = cfg.routed_experts;
    if affinities.numel() != n {
        return Err(Error::ShapeMismatch {
            op: "route",
            expected: format!("[{n}]"),
            got: format!("{:?}", affinities.shape()),
        });
    }
    if affinities.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite { op: "route" });
    }
    let ranking: Vec<f64> = affinities
        .data()
        .iter()
        .enumerate()
        .map(|(i, &s)| if use_bias { s + state.biases[i] } else { s })
        .collect();
    let experts = top_k_indices(&ranking, cfg.active_experts, allowed);

    // Gates from raw affinities, normalized over the selected set.
    let col = affinities.reshape(&[n, 1])?;
    let selected = col.select_rows(&experts)?;
    let total = selected.sum();
    let gates = selected.div(&total)?.reshape(&[cfg.active_experts])?;
    Ok(RoutingDecision {
        experts,
        gates,
        affinities: affinities.clone(),
    })
}

/// Physical placement of experts on nodes and the per-token node budget.
#[derive(Debug, Clone)]
pub struct NodeTopology {
    pub node_count: usize,
    /// Expert index -> node index.
    pub expert_node: Vec<usize>,
    /// Max distinct nodes a token may touch (M).
    pub max_nodes: usize,
}

impl NodeTopology {
    pub fn validate(&self, cfg: &ExpertConfig) -> Result<()> {
        if self.node_count == 0 || self.max_nodes == 0 {
            return Err(Error::Routing("empty topology".into()));
        }
        if self.expert_node.len() != cfg.routed_experts {
            return Err(Error::Routing(format!(
                "{} expert placements for {} experts",
                self.expert_node.len(),
                cfg.routed_experts
            )));
        }
        if let Some(&bad) = self.expert_node.iter().find(|&&n| n >= self.node_count) {
            return Err(Error::Routing(format!("expert placed on node {bad}")));
        }
        Ok(())
    }
}

/// Node-limited routing: pick the best `M` nodes by the sum of each node's
/// top `ceil(K_r/M)` affinity scores, then route top-K among the experts
/// hosted on those nodes. `M > node_count` is clamped.
pub fn node_limited_route(
    affinities: &Tensor,
    state: &RouterState,
    cfg: &ExpertConfig,
    topo: &NodeTopology,
    use_bias: bool,
) -> Result<RoutingDecision> {
    cfg.validate()?;
    topo.validate(cfg)?;
    let m = topo.max_nodes.min(topo.node_count);
    if affinities.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite { op: "node_limited_route" });
    }
    let ranking: Vec<f64> = affinities
        .data()
        .iter()
        .enumerate()
        .map(|(i, &s)| if use_bias { s + state.biases[i] } else { s })
        .collect();
    let per_node_take = cfg.active_experts.div_ceil(m);

    // Node score: sum of the node's strongest per_node_take experts.
    let mut node_scores = vec![0.0f64; topo.node_count];
    for node in 0..topo.node_count {
        let mut local: Vec<f64> = (0..cfg.routed_experts)
            .filter(|&e| topo.expert_node[e] == node)
            .map(|e| ranking[e])
            .collect();
        local.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
        node_scores[node] = local.iter().take(per_node_take).sum();
    }
    let chosen = top_k_indices(&node_scores, m, None);
    let mut allowed = vec![false; cfg.routed_experts];
    for (e, a) in allowed.iter_mut().enumerate() {
        *a = chosen.contains(&topo.expert_node[e]);
    }
    route_restricted(affinities, state, cfg, use_bias, Some(&allowed))
}

/// Bias update at a step boundary: overloaded experts (load above the mean)
/// lose `gamma`, underloaded ones gain it; exact ties stay put.
pub fn update_bias(loads: &[f64], state: &mut RouterState) -> Result<()> {
    if loads.len() != state.biases.len() {
        return Err(Error::ShapeMismatch {
            op: "update_bias",
            expected: format!("{} loads", state.biases.len()),
            got: format!("{}", loads.len()),
        });
    }
    let total: f64 = loads.iter().sum();
    if loads.iter().any(|&l| l < 0.0) || total <= 0.0 {
        return Err(Error::Routing(
            "loads must be nonnegative with at least one routed token".into(),
        ));
    }
    let mean = total / loads.len() as f64;
    for (b, &l) in state.biases.iter_mut().zip(loads) {
        if l > mean {
            *b -= state.gamma;
        } else if l < mean {
            *b += state.gamma;
        }
    }
    Ok(())
}

/// Scope of the auxiliary balance loss: per sequence or over the whole
/// batch's tokens (the formula is identical; the caller picks the token
/// set accordingly).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BalanceScope {
    Sequence,
    Batch,
}

#[derive(Debug, Clone, Copy)]
pub struct BalanceConfig {
    pub alpha: f64,
    pub scope: BalanceScope,
}

impl BalanceConfig {
    pub fn new(alpha: f64, scope: BalanceScope) -> Result<Self> {
        if alpha < 0.0 {
            return Err(Error::Routing("alpha must be nonnegative".into()));
        }
        Ok(Self { alpha, scope })
    }
}

/// Auxiliary balance loss over `T` tokens:
/// `alpha * sum_i f_i P_i` with `f_i = (N_r / (K_r T)) * #selections of i`
/// and `P_i` the mean of the per-token sum-normalized affinities.
pub fn balance_loss(
    affinities: &Tensor,
    selections: &[Vec<usize>],
    cfg: &ExpertConfig,
    bal: &BalanceConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let n = cfg.routed_experts;
    let t = selections.len();
    let shape_ok = matches!(affinities.shape(), [rows, cols] if *rows == t && *cols == n);
    if t == 0 || !shape_ok {
        return Err(Error::ShapeMismatch {
            op: "balance_loss",
            expected: format!("[{t} > 0, {n}]"),
            got: format!("{:?}", affinities.shape()),
        });
    }
    let mut counts = vec![0.0f64; n];
    for sel in selections {
        for &e in sel {
            if e >= n {
                return Err(Error::IndexOutOfRange {
                    op: "balance_loss",
                    index: e,
                    limit: n,
                });
            }
            counts[e] += 1.0;
        }
    }
    let f_scale = n as f64 / (cfg.active_experts as f64 * t as f64);
    let f = Tensor::new(counts.iter().map(|c| c * f_scale).collect(), &[n, 1])?;

    let row_sums = affinities.matmul(&Tensor::ones(&[n, 1]))?; // [T,1]
    let normalized = affinities.div(&row_sums)?; // column-broadcast
    let p = Tensor::ones(&[1, t])
        .matmul(&normalized)?
        .scale(1.0 / t as f64); // [1,N]
    Ok(p.matmul(&f)?.scale(bal.alpha).reshape(&[1])?)
}

/// Relative per-expert load: actual load divided by the perfectly balanced
/// load (total / N_r), so balanced experts sit at 1.0.
pub fn expert_load_profile(loads: &[f64], cfg: &ExpertConfig) -> Result<Vec<f64>> {
    if loads.len() != cfg.routed_experts {
        return Err(Error::ShapeMismatch {
            op: "expert_load_profile",
            expected: format!("{} loads", cfg.routed_experts),
            got: format!("{}", loads.len()),
        });
    }
    let total: f64 = loads.iter().sum();
    if total <= 0.0 {
        return Err(Error::Routing("zero total load".into()));
    }
    let balanced = total / cfg.routed_experts as f64;
    Ok(loads.iter().map(|l| l / balanced).collect())
}

/// Gated two-layer expert with a SwiGLU-style hidden activation:
/// `W_down (silu(W_gate x) * (W_up x))`.
#[derive(Clone)]
pub struct ExpertFfn {
    pub w_gate: Param,
    pub w_up: Param,
    pub w_down: Param,
}

impl ExpertFfn {
    pub fn init<R: Rng>(cfg: &ExpertConfig, std: f64, rng: &mut R) -> Self {
        Self {
            w_gate: Param::new(Tensor::randn(&[cfg.ffn_dim, cfg.embed_dim], std, rng)),
            w_up: Param::new(Tensor::randn(&[cfg.ffn_dim, cfg.embed_dim], std, rng)),
            w_down: Param::new(Tensor::randn(&[cfg.embed_dim, cfg.ffn_dim], std, rng)),
        }
    }

    /// Batched forward over `[T, d]` rows.
    pub fn forward(&self, x: &Tensor, tape: Option<&Tape>, mode: LinearMode) -> Result<Tensor> {
        let gate = crate::fp8::linear(x, &self.w_gate.read(tape), mode)?.silu();
        let up = crate::fp8::linear(x, &self.w_up.read(tape), mode)?;
        crate::fp8::linear(&gate.mul(&up)?, &self.w_down.read(tape), mode)
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.w_gate.clone(), self.w_up.clone(), self.w_down.clone()]
    }
}

/// Full expert layer: shared experts always active, routed experts gated.
pub struct MoeLayer {
    pub cfg: ExpertConfig,
    pub router: RouterState,
    pub shared: Vec<ExpertFfn>,
    pub routed: Vec<ExpertFfn>,
}

impl MoeLayer {
    pub fn init<R: Rng>(cfg: ExpertConfig, std: f64, gamma: f64, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            router: RouterState::init(&cfg, std, gamma, rng),
            shared: (0..cfg.shared_experts)
                .map(|_| ExpertFfn::init(&cfg, std, rng))
                .collect(),
            routed: (0..cfg.routed_experts)
                .map(|_| ExpertFfn::init(&cfg, std, rng))
                .collect(),
            cfg,
        })
    }

    /// Single-token layer output:
    /// `h' = u + sum_shared FFN_s(u) + sum_selected g_i FFN_i(u)`.
    /// No token is ever dropped: exactly K_r routed experts run.
    pub fn moe_forward(
        &self,
        u: &Tensor,
        decision: &RoutingDecision,
        tape: Option<&Tape>,
        mode: LinearMode,
    ) -> Result<Tensor> {
        if u.shape() != [self.cfg.embed_dim] {
            return Err(Error::ShapeMismatch {
                op: "moe_forward",
                expected: format!("[{}]", self.cfg.embed_dim),
                got: format!("{:?}", u.shape()),
            });
        }
        if decision.experts.len() != self.cfg.active_experts {
            return Err(Error::Routing(format!(
                "decision selects {} experts, config wants {}",
                decision.experts.len(),
                self.cfg.active_experts
            )));
        }
        let row = u.reshape(&[1, self.cfg.embed_dim])?;
        let mut out = row.clone();
        for ffn in &self.shared {
            out = out.add(&ffn.forward(&row, tape, mode)?)?;
        }
        for (slot, &e) in decision.experts.iter().enumerate() {
            let ffn = self.routed.get(e).ok_or(Error::IndexOutOfRange {
                op: "moe_forward",
                index: e,
                limit: self.routed.len(),
            })?;
            let gate = decision
                .gates
                .reshape(&[self.cfg.active_experts, 1])?
                .select_rows(&[slot])?;
            out = out.add(&ffn.forward(&row, tape, mode)?.mul(&gate)?)?;
        }
        out.reshape(&[self.cfg.embed_dim])
    }

    /// Batched layer pass: tokens grouped per expert, outputs scattered
    /// back and gated. Equivalent to `moe_forward` per row.
    pub fn forward_batch(
        &self,
        us: &Tensor,
        decisions: &[RoutingDecision],
        tape: Option<&Tape>,
        mode: LinearMode,
    ) -> Result<Tensor> {
        let t = us.lead_rows();
        if decisions.len() != t {
            return Err(Error::Routing(format!(
                "{} routing decisions for {t} tokens",
                decisions.len()
            )));
        }
        let mut out = us.clone();
        for ffn in &self.shared {
            out = out.add(&ffn.forward(us, tape, mode)?)?;
        }
        // Group token slots by expert.
        let mut per_expert: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.cfg.routed_experts];
        for (tok, d) in decisions.iter().enumerate() {
            for (slot, &e) in d.experts.iter().enumerate() {
                per_expert
                    .get_mut(e)
                    .ok_or(Error::IndexOutOfRange {
                        op: "forward_batch",
                        index: e,
                        limit: self.cfg.routed_experts,
                    })?
                    .push((tok, slot));
            }
        }
        for (e, entries) in per_expert.iter().enumerate() {
            if entries.is_empty() {
                continue;
            }
            let tokens: Vec<usize> = entries.iter().map(|(t, _)| *t).collect();
            let x = us.select_rows(&tokens)?;
            let y = self.routed[e].forward(&x, tape, mode)?;
            let gate_rows: Vec<Tensor> = entries
                .iter()
                .map(|(tok, slot)| {
                    decisions[*tok]
                        .gates
                        .reshape(&[self.cfg.active_experts, 1])?
                        .select_rows(&[*slot])?
                        .reshape(&[1])
                })
                .collect::<Result<_>>()?;
            let gates = Tensor::stack_rows(&gate_rows)?; // [n_e, 1]
            let contribution = y.mul(&gates)?.scatter_add_rows(&tokens, t)?;
            out = out.add(&contribution)?;
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<Param> {
        let mut p = vec![self.router.centroids.clone()];
        for f in self.shared.iter().chain(&self.routed) {
            p.extend(f.params());
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(n_r: usize, k_r: usize, d: usize) -> ExpertConfig {
        ExpertConfig {
            shared_experts: 1,
            routed_experts: n_r,
            active_experts: k_r,
            embed_dim: d,
            ffn_dim: 2 * d,
        }
    }

    fn state_with_biases(cfg: &ExpertConfig, biases: &[f64]) -> RouterState {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut st = RouterState::init(cfg, 0.1, 0.001, &mut rng);
        st.biases = biases.to_vec();
        st
    }

    #[test]
    fn affinity_is_sigmoid_of_dot() {
        let c = cfg(2, 1, 2);
        let st = state_with_biases(&c, &[0.0, 0.0]);
        st.centroids
            .set(Tensor::new(vec![2.0, 0.0, 0.0, 3.0], &[2, 2]).unwrap());
        // Orthogonal token: affinity exactly 0.5.
        let s = st
            .affinity(&Tensor::new(vec![0.0, 1.0], &[2]).unwrap(), None)
            .unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-15);
        // u=[1,0] against e=[2,0]: sigmoid(2) = 0.88080.
        let s = st
            .affinity(&Tensor::new(vec![1.0, 0.0], &[2]).unwrap(), None)
            .unwrap();
        assert!((s.data()[0] - 0.8807970779778823).abs() < 1e-12);
        assert!((s.data()[0] - 0.88080).abs() < 1e-5);
    }

    #[test]
    fn affinity_monotone_in_dot_product() {
        let c = cfg(1, 1, 2);
        let st = state_with_biases(&c, &[0.0]);
        st.centroids
            .set(Tensor::new(vec![1.0, 0.5], &[1, 2]).unwrap());
        let mut prev = -1.0;
        for k in 0..10 {
            let u = Tensor::new(vec![k as f64 * 0.3, 0.1], &[2]).unwrap();
            let s = st.affinity(&u, None).unwrap().data()[0];
            assert!(s > prev);
            prev = s;
        }
    }

    #[test]
    fn route_full_selection_normalizes_all() {
        let c = cfg(2, 2, 2);
        let st = state_with_biases(&c, &[0.0, 0.0]);
        let s = Tensor::new(vec![0.6, 0.3], &[2]).unwrap();
        let d = route(&s, &st, &c, false).unwrap();
        assert_eq!(d.experts, vec![0, 1]);
        assert!((d.gates.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((d.gates.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn bias_changes_selection_but_not_gate_formula() {
        // s=[0.5,0.4], b=[0,0.2], K_r=1: expert 1 wins on s+b but its gate
        // comes from raw s (a single selected expert gets gate 1).
        let c = cfg(2, 1, 2);
        let st = state_with_biases(&c, &[0.0, 0.2]);
        let s = Tensor::new(vec![0.5, 0.4], &[2]).unwrap();
        let d = route(&s, &st, &c, true).unwrap();
        assert_eq!(d.experts, vec![1]);
        assert!((d.gates.data()[0] - 1.0).abs() < 1e-15);
        // Without the bias the first expert wins.
        let d = route(&s, &st, &c, false).unwrap();
        assert_eq!(d.experts, vec![0]);
    }

    #[test]
    fn gate_values_match_raw_normalization_for_any_bias() {
        let c = cfg(6, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let biases: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let st = state_with_biases(&c, &biases);
            let s_data: Vec<f64> = (0..6).map(|_| rng.gen_range(0.01..0.99)).collect();
            let s = Tensor::new(s_data.clone(), &[6]).unwrap();
            let d = route(&s, &st, &c, true).unwrap();
            let total: f64 = d.experts.iter().map(|&e| s_data[e]).sum();
            for (slot, &e) in d.experts.iter().enumerate() {
                assert!((d.gates.data()[slot] - s_data[e] / total).abs() < 1e-12);
            }
            let gate_sum: f64 = d.gates.data().iter().sum();
            assert!((gate_sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn route_rejects_nan() {
        let c = cfg(2, 1, 2);
        let st = state_with_biases(&c, &[0.0, 0.0]);
        let s = Tensor::new(vec![f64::NAN, 0.5], &[2]).unwrap();
        assert!(route(&s, &st, &c, false).is_err());
    }

    #[test]
    fn top_k_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..=12usize {
            for _ in 0..20 {
                let k = rng.gen_range(1..=n);
                let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
                let got = top_k_indices(&scores, k, None);
                // Oracle: check every non-selected score is <= every
                // selected one, and ties broke toward lower indices.
                for &sel in &got {
                    for other in 0..n {
                        if got.contains(&other) {
                            continue;
                        }
                        assert!(
                            scores[other] < scores[sel]
                                || (scores[other] == scores[sel] && other > sel)
                        );
                    }
                }
                assert_eq!(got.len(), k);
            }
        }
    }

    #[test]
    fn node_limited_route_enumeration_oracle() {
        // 2 nodes x 2 experts, affinities [0.9, 0.1 | 0.5, 0.4], K_r=2,
        // M=1: node scores 1.0 vs 0.9 -> node 0, experts {0, 1}.
        let c = cfg(4, 2, 2);
        let st = state_with_biases(&c, &[0.0; 4]);
        let topo = NodeTopology {
            node_count: 2,
            expert_node: vec![0, 0, 1, 1],
            max_nodes: 1,
        };
        let s = Tensor::new(vec![0.9, 0.1, 0.5, 0.4], &[4]).unwrap();
        let d = node_limited_route(&s, &st, &c, &topo, false).unwrap();
        assert_eq!(d.experts, vec![0, 1]);
    }

    #[test]
    fn node_limit_with_enough_nodes_equals_plain_route() {
        let c = cfg(6, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let st = state_with_biases(&c, &[0.0; 6]);
        let topo = NodeTopology {
            node_count: 3,
            expert_node: vec![0, 0, 1, 1, 2, 2],
            // M >= node_count (clamped): no restriction.
            max_nodes: 7,
        };
        for _ in 0..20 {
            let s_data: Vec<f64> = (0..6).map(|_| rng.gen_range(0.01..0.99)).collect();
            let s = Tensor::new(s_data, &[6]).unwrap();
            let plain = route(&s, &st, &c, false).unwrap();
            let limited = node_limited_route(&s, &st, &c, &topo, false).unwrap();
            assert_eq!(plain.experts, limited.experts);
        }
    }

    #[test]
    fn node_limited_route_touches_at_most_m_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = cfg(8, 4, 4);
        let st = state_with_biases(&c, &[0.0; 8]);
        for m in 1..=4usize {
            let topo = NodeTopology {
                node_count: 4,
                expert_node: vec![0, 0, 1, 1, 2, 2, 3, 3],
                max_nodes: m,
            };
            for _ in 0..50 {
                let s_data: Vec<f64> = (0..8).map(|_| rng.gen_range(0.01..0.99)).collect();
                let s = Tensor::new(s_data, &[8]).unwrap();
                let d = node_limited_route(&s, &st, &c, &topo, false).unwrap();
                let mut nodes: Vec<usize> =
                    d.experts.iter().map(|&e| topo.expert_node[e]).collect();
                nodes.sort_unstable();
                nodes.dedup();
                assert!(nodes.len() <= m);
            }
        }
    }

    #[test]
    fn update_bias_rule() {
        let c = cfg(2, 1, 2);
        let mut st = state_with_biases(&c, &[0.0, 0.0]);
        // Perfectly balanced: unchanged.
        update_bias(&[2.0, 2.0], &mut st).unwrap();
        assert_eq!(st.biases, vec![0.0, 0.0]);
        // loads [3,1], mean 2: b -> [-gamma, +gamma].
        update_bias(&[3.0, 1.0], &mut st).unwrap();
        assert!((st.biases[0] + 0.001).abs() < 1e-15);
        assert!((st.biases[1] - 0.001).abs() < 1e-15);
        assert!(update_bias(&[0.0, 0.0], &mut st).is_err());
    }

    #[test]
    fn balance_loss_hand_case() {
        // N_r=2, K_r=1, T=2, s=[[0.8,0.2],[0.6,0.4]], both select expert 0:
        // f=[2,0], P=[0.7,0.3], L = alpha * 1.4.
        let c = cfg(2, 1, 2);
        let bal = BalanceConfig::new(0.0001, BalanceScope::Sequence).unwrap();
        let s = Tensor::new(vec![0.8, 0.2, 0.6, 0.4], &[2, 2]).unwrap();
        let l = balance_loss(&s, &[vec![0], vec![0]], &c, &bal).unwrap();
        assert!((l.item().unwrap() - 0.0001 * 1.4).abs() < 1e-15);
    }

    #[test]
    fn balance_loss_uniform_equals_alpha() {
        // Uniform selection and uniform normalized affinities: f_i = 1,
        // P_i = 1/N_r, so the sum is exactly 1 and L = alpha.
        let c = cfg(4, 2, 2);
        let bal = BalanceConfig::new(0.01, BalanceScope::Batch).unwrap();
        let s = Tensor::full(&[4, 4], 0.25);
        let selections = vec![vec![0, 1], vec![2, 3], vec![0, 2], vec![1, 3]];
        let l = balance_loss(&s, &selections, &c, &bal).unwrap();
        assert!((l.item().unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn balance_loss_uniform_is_minimal() {
        // Uniform routing attains the lower bound of sum f_i P_i.
        let c = cfg(4, 2, 2);
        let bal = BalanceConfig::new(1.0, BalanceScope::Batch).unwrap();
        let uniform = {
            let s = Tensor::full(&[8, 4], 0.25);
            let selections: Vec<Vec<usize>> = (0..8).map(|t| vec![t % 4, (t + 1) % 4]).collect();
            balance_loss(&s, &selections, &c, &bal).unwrap().item().unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let data: Vec<f64> = (0..32).map(|_| rng.gen_range(0.01..0.99)).collect();
            let s = Tensor::new(data.clone(), &[8, 4]).unwrap();
            let st = state_with_biases(&c, &[0.0; 4]);
            let selections: Vec<Vec<usize>> = (0..8)
                .map(|t| {
                    let row = Tensor::new(data[t * 4..(t + 1) * 4].to_vec(), &[4]).unwrap();
                    route(&row, &st, &c, false).unwrap().experts
                })
                .collect();
            let l = balance_loss(&s, &selections, &c, &bal).unwrap().item().unwrap();
            assert!(uniform <= l + 1e-12);
        }
    }

    #[test]
    fn load_profile_examples() {
        let c = cfg(2, 1, 2);
        let p = expert_load_profile(&[30.0, 10.0], &c).unwrap();
        assert_eq!(p, vec![1.5, 0.5]);
        let p = expert_load_profile(&[5.0, 5.0], &c).unwrap();
        assert_eq!(p, vec![1.0, 1.0]);
        // Mean of the ratios is 1, so the max is always >= 1.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let c8 = cfg(8, 2, 2);
        for _ in 0..50 {
            let loads: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..10.0) + 0.01).collect();
            let p = expert_load_profile(&loads, &c8).unwrap();
            let max = p.iter().copied().fold(0.0, f64::max);
            assert!(max >= 1.0 - 1e-12);
        }
        assert!(expert_load_profile(&[0.0, 0.0], &c).is_err());
    }

    #[test]
    fn moe_forward_residual_identity_and_shared_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let c = cfg(2, 1, 4);
        let layer = MoeLayer::init(c, 0.1, 0.001, &mut rng).unwrap();
        let u = Tensor::randn(&[4], 1.0, &mut rng);

        // Zero every expert: residual identity.
        let zeroed = MoeLayer::init(c, 0.0, 0.001, &mut rng).unwrap();
        let s = zeroed.router.affinity(&u, None).unwrap();
        let d = route(&s, &zeroed.router, &c, false).unwrap();
        let out = zeroed.moe_forward(&u, &d, None, LinearMode::Exact).unwrap();
        for (a, b) in out.data().iter().zip(u.data()) {
            assert!((a - b).abs() < 1e-15);
        }

        // Zero routed gates contribute nothing beyond shared experts.
        let s = layer.router.affinity(&u, None).unwrap();
        let mut d = route(&s, &layer.router, &c, false).unwrap();
        d.gates = Tensor::zeros(&[1]);
        let out = layer.moe_forward(&u, &d, None, LinearMode::Exact).unwrap();
        let shared = layer.shared[0]
            .forward(&u.reshape(&[1, 4]).unwrap(), None, LinearMode::Exact)
            .unwrap();
        for i in 0..4 {
            assert!((out.data()[i] - (u.data()[i] + shared.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn moe_forward_matches_brute_force_sum() {
        // Tiny config evaluated directly against the layer-combination
        // formula computed with raw vector arithmetic.
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let c = cfg(2, 1, 2);
        let layer = MoeLayer::init(c, 0.4, 0.001, &mut rng).unwrap();
        let u = Tensor::randn(&[2], 1.0, &mut rng);
        let s = layer.router.affinity(&u, None).unwrap();
        let d = route(&s, &layer.router, &c, false).unwrap();
        let out = layer.moe_forward(&u, &d, None, LinearMode::Exact).unwrap();

        let ffn_eval = |ffn: &ExpertFfn, x: &[f64]| -> Vec<f64> {
            let mv = |w: &Tensor, v: &[f64]| -> Vec<f64> {
                let (r, c) = (w.shape()[0], w.shape()[1]);
                (0..r)
                    .map(|i| (0..c).map(|j| w.data()[i * c + j] * v[j]).sum())
                    .collect()
            };
            let g = mv(&ffn.w_gate.value(), x);
            let up = mv(&ffn.w_up.value(), x);
            let hidden: Vec<f64> = g
                .iter()
                .zip(&up)
                .map(|(&gv, &uv)| gv / (1.0 + (-gv).exp()) * uv)
                .collect();
            mv(&ffn.w_down.value(), &hidden)
        };
        let shared = ffn_eval(&layer.shared[0], u.data());
        let routed = ffn_eval(&layer.routed[d.experts[0]], u.data());
        let gate = d.gates.data()[0];
        for i in 0..2 {
            let expect = u.data()[i] + shared[i] + gate * routed[i];
            assert!((out.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_forward_matches_per_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let c = cfg(4, 2, 6);
        let layer = MoeLayer::init(c, 0.2, 0.001, &mut rng).unwrap();
        let t = 7;
        let us = Tensor::randn(&[t, 6], 1.0, &mut rng);
        let affin = layer.router.affinity_batch(&us, None).unwrap();
        let decisions: Vec<RoutingDecision> = (0..t)
            .map(|i| {
                let row = affin.slice_rows(i, 1).unwrap().reshape(&[4]).unwrap();
                route(&row, &layer.router, &c, true).unwrap()
            })
            .collect();
        let batched = layer
            .forward_batch(&us, &decisions, None, LinearMode::Exact)
            .unwrap();
        for i in 0..t {
            let u = us.slice_rows(i, 1).unwrap().reshape(&[6]).unwrap();
            let single = layer
                .moe_forward(&u, &decisions[i], None, LinearMode::Exact)
                .unwrap();
            for (a, b) in batched.data()[i * 6..(i + 1) * 6].iter().zip(single.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gates_carry_gradient_to_centroids() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let c = cfg(4, 2, 3);
        let layer = MoeLayer::init(c, 0.3, 0.001, &mut rng).unwrap();
        let tape = Tape::new();
        let u = tape.watch(&Tensor::randn(&[3], 1.0, &mut rng));
        let s = layer.router.affinity(&u, Some(&tape)).unwrap();
        let d = route(&s, &layer.router, &c, false).unwrap();
        let out = layer
            .moe_forward(&u, &d, Some(&tape), LinearMode::Exact)
            .unwrap();
        let loss = out.mul(&out).unwrap().sum();
        let grads = loss.backward().unwrap();
        let g = grads.wrt_param(&layer.router.centroids).unwrap();
        assert!(g.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn closed_loop_bias_iteration_balances_skewed_affinities() {
        // Fixed skewed affinity distribution; iterating route + update_bias
        // must drive the max relative load down monotonically until within
        // one token swap of balanced.
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let n_r = 8;
        let k_r = 2;
        let t = 64;
        let c = ExpertConfig {
            shared_experts: 0,
            routed_experts: n_r,
            active_experts: k_r,
            embed_dim: 4,
            ffn_dim: 8,
        };
        let mut st = state_with_biases(&c, &vec![0.0; n_r]);
        st.gamma = 0.005;
        // Every token mildly prefers low-index experts, with per-token
        // jitter so bias nudges flip tokens one at a time.
        let affinities: Vec<Tensor> = (0..t)
            .map(|_| {
                let data: Vec<f64> = (0..n_r)
                    .map(|e| 0.6 - 0.04 * e as f64 + rng.gen_range(0.0..0.02))
                    .collect();
                Tensor::new(data, &[n_r]).unwrap()
            })
            .collect();

        let max_rel = |st: &RouterState| -> f64 {
            let mut loads = vec![0.0f64; n_r];
            for s in &affinities {
                let d = route(s, st, &c, true).unwrap();
                for &e in &d.experts {
                    loads[e] += 1.0;
                }
            }
            expert_load_profile(&loads, &c)
                .unwrap()
                .into_iter()
                .fold(0.0, f64::max)
        };

        let mut history = vec![max_rel(&st)];
        assert!(history[0] > 2.0, "scenario must start skewed");
        for _ in 0..400 {
            let mut loads = vec![0.0f64; n_r];
            for s in &affinities {
                let d = route(s, &st, &c, true).unwrap();
                for &e in &d.experts {
                    loads[e] += 1.0;
                }
            }
            update_bias(&loads, &mut st).unwrap();
            history.push(max_rel(&st));
        }
        for w in history.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-12,
                "max relative load increased: {} -> {}",
                w[0],
                w[1]
            );
        }
        // Within one token swap of perfectly balanced.
        let one_swap = n_r as f64 / (t * k_r) as f64;
        let last = *history.last().unwrap();
        assert!(
            last <= 1.0 + one_swap + 1e-12,
            "final max relative load {last} not within one swap of 1.0"
        );
        assert!(last < history[0]);
    }
}
