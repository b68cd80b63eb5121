//! Projection head: type anchors, token and span representations, and
//! temperature-scaled cosine scores.

use rand::Rng;
use serde::{Deserialize, Serialize};
use typespan_numcore::{normal_tensor, Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub d_model: usize,
    /// Output size of every projection.
    pub d_proj: usize,
    /// Span width embedding size.
    pub width_dim: usize,
    /// Rows of the width table; widths `0..width_rows` are representable.
    pub width_rows: usize,
    pub init_temperature: f64,
    /// Ablation: one type-side and one token-side projection for all channels.
    pub shared_linear: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_proj: 128,
            width_dim: 128,
            width_rows: 130,
            init_temperature: 0.07,
            shared_linear: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub(crate) fn init(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            w: store.insert(format!("{name}.w"), normal_tensor(rng, &[fan_in, fan_out], 0.02))?,
            b: store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))?,
        })
    }

    pub(crate) fn resolve(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            w: store.id(&format!("{name}.w"))?,
            b: store.id(&format!("{name}.b"))?,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        Ok(g.linear(x, w, b)?)
    }
}

/// Similarity channel; each has its own learnable temperature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Start,
    End,
    Span,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Start, Channel::End, Channel::Span];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Start => "start",
            Channel::End => "end",
            Channel::Span => "span",
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub config: HeadConfig,
    pub lin_e: Linear,
    pub lin_e_b: Linear,
    pub lin_e_q: Linear,
    pub lin_t_b: Linear,
    pub lin_t_q: Linear,
    pub lin_s: Linear,
    pub width: ParamId,
    /// `ln τ` for start, end and span.
    pub log_tau: [ParamId; 3],
}

impl HeadParams {
    pub fn init(store: &mut ParamStore, config: &HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        let (d, p, m) = (config.d_model, config.d_proj, config.width_dim);
        if !(config.init_temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Linear::init(store, "head.lin_e", d, p, rng)?;
        Linear::init(store, "head.lin_t_b", d, p, rng)?;
        if !config.shared_linear {
            Linear::init(store, "head.lin_e_b", d, p, rng)?;
            Linear::init(store, "head.lin_e_q", d, p, rng)?;
            Linear::init(store, "head.lin_t_q", d, p, rng)?;
        }
        Linear::init(store, "head.lin_s", 2 * d + m, p, rng)?;
        store.insert("head.width", normal_tensor(rng, &[config.width_rows, m], 0.02))?;
        let lt = config.init_temperature.ln();
        for ch in Channel::ALL {
            store.insert(format!("head.log_tau_{}", ch.name()), Tensor::scalar(lt))?;
        }
        Self::resolve(store, config)
    }

    pub fn resolve(store: &ParamStore, config: &HeadConfig) -> Result<Self> {
        let lin_e = Linear::resolve(store, "head.lin_e")?;
        let lin_t_b = Linear::resolve(store, "head.lin_t_b")?;
        let (lin_e_b, lin_e_q, lin_t_q) = if config.shared_linear {
            (lin_e, lin_e, lin_t_b)
        } else {
            (
                Linear::resolve(store, "head.lin_e_b")?,
                Linear::resolve(store, "head.lin_e_q")?,
                Linear::resolve(store, "head.lin_t_q")?,
            )
        };
        Ok(Self {
            config: config.clone(),
            lin_e,
            lin_e_b,
            lin_e_q,
            lin_t_b,
            lin_t_q,
            lin_s: Linear::resolve(store, "head.lin_s")?,
            width: store.id("head.width")?,
            log_tau: [
                store.id("head.log_tau_start")?,
                store.id("head.log_tau_end")?,
                store.id("head.log_tau_span")?,
            ],
        })
    }

    /// Current temperature of a channel.
    pub fn temperature(&self, store: &ParamStore, ch: Channel) -> f64 {
        store.get(self.log_tau[ch.index()]).item().exp()
    }

    /// `1/τ = exp(−ln τ)` as a graph scalar.
    pub fn inv_temperature(&self, g: &mut Graph, ch: Channel) -> Result<Var> {
        let lt = g.param(self.log_tau[ch.index()]);
        let neg = g.scale(lt, -1.0)?;
        Ok(g.exp(neg)?)
    }

    /// Span, start and end anchors from per-type summary states `(K, d_model)`.
    pub fn type_embeddings(&self, g: &mut Graph, h_cls: Var) -> Result<TypeEmbeddingVars> {
        Ok(TypeEmbeddingVars {
            e: self.lin_e.apply(g, h_cls)?,
            e_b: self.lin_e_b.apply(g, h_cls)?,
            e_q: self.lin_e_q.apply(g, h_cls)?,
        })
    }

    /// Start-side `u` and end-side `v` token embeddings.
    pub fn token_projections(&self, g: &mut Graph, hidden: Var) -> Result<(Var, Var)> {
        let u = self.lin_t_b.apply(g, hidden)?;
        let v = self.lin_t_q.apply(g, hidden)?;
        Ok((u, v))
    }

    fn check_span(&self, len: usize, i: usize, j: usize) -> Result<()> {
        if i > j {
            return Err(Error::SpanOrder { start: i, end: j });
        }
        if j >= len {
            return Err(Error::SpanWidth { width: j, rows: len });
        }
        if j - i >= self.config.width_rows {
            return Err(Error::SpanWidth {
                width: j - i,
                rows: self.config.width_rows,
            });
        }
        Ok(())
    }

    /// `lin_s(hidden[i] ⊕ hidden[j] ⊕ width[j − i])` for one span, computed
    /// literally through concatenation. Indices address hidden rows.
    pub fn span_representation(&self, g: &mut Graph, hidden: Var, i: usize, j: usize) -> Result<Var> {
        let len = g.value(hidden).dims2().0;
        self.check_span(len, i, j)?;
        let hi = g.slice_rows(hidden, i, i + 1)?;
        let hj = g.slice_rows(hidden, j, j + 1)?;
        let table = g.param(self.width);
        let w = g.slice_rows(table, j - i, j - i + 1)?;
        let x = g.concat_cols(&[hi, hj, w])?;
        let s = self.lin_s.apply(g, x)?;
        Ok(g.reshape(s, &[self.config.d_proj])?)
    }

    /// Span representations for many spans at once, shape `(spans, d_proj)`.
    ///
    /// Splits `lin_s` into its start, end and width blocks so each hidden row
    /// is projected once; equal to [`span_representation`](Self::span_representation)
    /// up to rounding.
    pub fn span_matrix(&self, g: &mut Graph, hidden: Var, spans: &[(usize, usize)]) -> Result<Var> {
        let d = self.config.d_model;
        let len = g.value(hidden).dims2().0;
        let mut max_w = 0;
        for &(i, j) in spans {
            self.check_span(len, i, j)?;
            max_w = max_w.max(j - i);
        }
        let w = g.param(self.lin_s.w);
        let w_start = g.slice_rows(w, 0, d)?;
        let w_end = g.slice_rows(w, d, 2 * d)?;
        let w_width = g.slice_rows(w, 2 * d, 2 * d + self.config.width_dim)?;
        let a = g.matmul(hidden, w_start)?;
        let b = g.matmul(hidden, w_end)?;
        let table = g.param(self.width);
        let widths = g.slice_rows(table, 0, max_w + 1)?;
        let bias = g.param(self.lin_s.b);
        let c = g.linear(widths, w_width, bias)?;
        Ok(g.span_compose(a, b, c, spans)?)
    }

    /// Start, end and span scores of every row/span against every type.
    /// `spans` index hidden rows (so `(0, 0)` is the `[CLS]` threshold span).
    pub fn sequence_scores(
        &self,
        g: &mut Graph,
        hidden: Var,
        types: &TypeEmbeddingVars,
        spans: &[(usize, usize)],
    ) -> Result<SequenceScores> {
        let (u, v) = self.token_projections(g, hidden)?;
        let s = self.span_matrix(g, hidden, spans)?;
        let scored = |g: &mut Graph, x: Var, e: Var, ch: Channel| -> Result<Var> {
            let cos = g.cosine_matrix(x, e)?;
            let it = self.inv_temperature(g, ch)?;
            Ok(g.mul_scalar_var(cos, it)?)
        };
        Ok(SequenceScores {
            start: scored(g, u, types.e_b, Channel::Start)?,
            end: scored(g, v, types.e_q, Channel::End)?,
            span: scored(g, s, types.e, Channel::Span)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for l in [self.lin_e, self.lin_e_b, self.lin_e_q, self.lin_t_b, self.lin_t_q, self.lin_s] {
            if !out.contains(&l.w) {
                out.extend([l.w, l.b]);
            }
        }
        out.push(self.width);
        out.extend(self.log_tau);
        out
    }
}

/// `cos(a, b) / τ` given `1/τ` as a graph scalar.
pub fn scaled_cosine(g: &mut Graph, a: Var, b: Var, inv_tau: Var) -> Result<Var> {
    let c = g.cosine(a, b)?;
    Ok(g.mul_scalar_var(c, inv_tau)?)
}

/// Type anchors inside a graph, each `(K, d_proj)`.
#[derive(Clone, Copy, Debug)]
pub struct TypeEmbeddingVars {
    pub e: Var,
    pub e_b: Var,
    pub e_q: Var,
}

/// Type anchors as plain values, computed once and reused across documents.
#[derive(Clone, Debug, PartialEq)]
pub struct TypeEmbeddings {
    pub e: Tensor,
    pub e_b: Tensor,
    pub e_q: Tensor,
}

impl TypeEmbeddings {
    pub fn from_vars(g: &Graph, vars: &TypeEmbeddingVars) -> Self {
        Self {
            e: g.value(vars.e).clone(),
            e_b: g.value(vars.e_b).clone(),
            e_q: g.value(vars.e_q).clone(),
        }
    }

    pub fn num_types(&self) -> usize {
        self.e.dims2().0
    }

    /// Inserts the anchors as graph leaves.
    pub fn to_graph(&self, g: &mut Graph, requires_grad: bool) -> Result<TypeEmbeddingVars> {
        Ok(TypeEmbeddingVars {
            e: g.input(self.e.clone(), requires_grad)?,
            e_b: g.input(self.e_b.clone(), requires_grad)?,
            e_q: g.input(self.e_q.clone(), requires_grad)?,
        })
    }
}

/// Scaled similarity matrices of one sequence.
#[derive(Clone, Copy, Debug)]
pub struct SequenceScores {
    /// `(len, K)`: `sim(u_n, e_k^B)`.
    pub start: Var,
    /// `(len, K)`: `sim(v_n, e_k^Q)`.
    pub end: Var,
    /// `(spans, K)`: `sim(s_ij, e_k)`.
    pub span: Var,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use typespan_numcore::grad_check;

    fn small(shared: bool) -> HeadConfig {
        HeadConfig {
            d_model: 4,
            d_proj: 4,
            width_dim: 3,
            width_rows: 6,
            shared_linear: shared,
            ..Default::default()
        }
    }

    fn setup(cfg: &HeadConfig, seed: u64) -> (ParamStore, HeadParams, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let head = HeadParams::init(&mut store, cfg, &mut rng).unwrap();
        let hidden = normal_tensor(&mut rng, &[5, cfg.d_model], 1.0);
        (store, head, hidden)
    }

    fn set_identity(store: &mut ParamStore, l: Linear, n: usize) {
        let w = store.get_mut(l.w).data_mut();
        w.fill(0.0);
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        store.get_mut(l.b).data_mut().fill(0.0);
    }

    #[test]
    fn span_input_width_with_default_sizes() {
        let cfg = HeadConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let head = HeadParams::init(&mut store, &cfg, &mut rng).unwrap();
        assert_eq!(store.get(head.lin_s.w).shape(), &[256, 128]);
        assert_eq!(store.get(head.width).shape(), &[130, 128]);
        for ch in Channel::ALL {
            assert!((head.temperature(&store, ch) - 0.07).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_projection_passes_rows_through() {
        let cfg = small(false);
        let (mut store, head, hidden) = setup(&cfg, 1);
        set_identity(&mut store, head.lin_e, 4);
        set_identity(&mut store, head.lin_t_b, 4);
        let mut g = Graph::with_params(&store);
        let row = Tensor::matrix(1, 4, hidden.row(0).to_vec()).unwrap();
        let x = g.constant(row.clone()).unwrap();
        let types = head.type_embeddings(&mut g, x).unwrap();
        assert!(g.value(types.e).max_abs_diff(&row) < 1e-15);
        let h = g.constant(hidden.clone()).unwrap();
        let (u, _) = head.token_projections(&mut g, h).unwrap();
        assert!(g.value(u).max_abs_diff(&hidden) < 1e-15);
        assert_eq!(g.shape(u), &[5, 4]);
    }

    #[test]
    fn zero_input_gives_bias() {
        let cfg = small(false);
        let (mut store, head, _) = setup(&cfg, 2);
        store.get_mut(head.lin_e.b).data_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.25]);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(&[1, 4])).unwrap();
        let types = head.type_embeddings(&mut g, x).unwrap();
        assert_eq!(g.value(types.e).data(), &[0.5, -1.0, 2.0, 0.25]);
    }

    #[test]
    fn three_anchors_differ_at_random_init() {
        let cfg = small(false);
        let (store, head, hidden) = setup(&cfg, 3);
        let mut g = Graph::with_params(&store);
        let x = g.constant(hidden).unwrap();
        let t = head.type_embeddings(&mut g, x).unwrap();
        let (e, b, q) = (g.value(t.e), g.value(t.e_b), g.value(t.e_q));
        assert!(e.max_abs_diff(b) > 1e-6 && e.max_abs_diff(q) > 1e-6 && b.max_abs_diff(q) > 1e-6);
    }

    #[test]
    fn gradient_reaches_start_projection() {
        let cfg = small(false);
        let (mut store, head, hidden) = setup(&cfg, 4);
        let report = grad_check(&mut store, 1e-5, |g| {
            let h = g.constant(hidden.clone())?;
            let e = g.constant(Tensor::matrix(2, 4, vec![1.0, 0.5, -0.3, 0.2, -1.0, 0.1, 0.4, 0.9]).unwrap())?;
            let (u, _) = head.token_projections(g, h).map_err(num)?;
            let c = g.cosine_matrix(u, e)?;
            let c = g.mul(c, c)?;
            g.sum(c)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
        let mut g = Graph::with_params(&store);
        let h = g.constant(hidden).unwrap();
        let (u, _) = head.token_projections(&mut g, h).unwrap();
        let s = g.sum(u).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.param(head.lin_t_b.w).unwrap().data().iter().any(|v| *v != 0.0));
    }

    fn num(e: Error) -> typespan_numcore::NumError {
        match e {
            Error::Num(n) => n,
            other => typespan_numcore::NumError::Invalid(other.to_string()),
        }
    }

    #[test]
    fn span_representation_uses_width_rows() {
        let cfg = small(false);
        let (mut store, head, hidden) = setup(&cfg, 5);
        let mut g = Graph::with_params(&store);
        let h = g.constant(hidden.clone()).unwrap();
        let s22 = head.span_representation(&mut g, h, 2, 2).unwrap();
        let s13 = head.span_representation(&mut g, h, 1, 3).unwrap();
        let s23 = head.span_representation(&mut g, h, 2, 3).unwrap();
        assert_eq!(g.shape(s22), &[4]);
        assert!(g.value(s13).max_abs_diff(g.value(s23)) > 1e-6);
        let before = g.value(s22).clone();
        drop(g);
        // Changing a width row other than 0 leaves single-token spans alone.
        store.get_mut(head.width).data_mut()[3..].fill(9.0);
        let mut g = Graph::with_params(&store);
        let h = g.constant(hidden).unwrap();
        let s22 = head.span_representation(&mut g, h, 2, 2).unwrap();
        assert_eq!(g.value(s22), &before);
    }

    #[test]
    fn span_errors() {
        let cfg = small(false);
        let (store, head, hidden) = setup(&cfg, 6);
        let mut g = Graph::with_params(&store);
        let h = g.constant(hidden).unwrap();
        assert!(matches!(
            head.span_representation(&mut g, h, 3, 1),
            Err(Error::SpanOrder { start: 3, end: 1 })
        ));
        assert!(matches!(head.span_matrix(&mut g, h, &[(0, 5)]), Err(Error::SpanWidth { .. })));
        let long = g.constant(Tensor::zeros(&[8, 4])).unwrap();
        assert!(matches!(
            head.span_matrix(&mut g, long, &[(0, 6)]),
            Err(Error::SpanWidth { width: 6, rows: 6 })
        ));
    }

    #[test]
    fn decomposed_spans_match_concatenation() {
        let cfg = small(false);
        let (store, head, hidden) = setup(&cfg, 7);
        let spans = [(0, 0), (0, 4), (1, 1), (1, 3), (2, 4), (4, 4)];
        let mut g = Graph::with_params(&store);
        let h = g.constant(hidden).unwrap();
        let m = head.span_matrix(&mut g, h, &spans).unwrap();
        let fast = g.value(m).clone();
        for (r, &(i, j)) in spans.iter().enumerate() {
            let s = head.span_representation(&mut g, h, i, j).unwrap();
            for (a, b) in fast.row(r).iter().zip(g.value(s).data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scaled_cosine_examples() {
        let mut g = Graph::new();
        let it = g.constant(Tensor::scalar(1.0 / 0.07)).unwrap();
        let a = g.constant(Tensor::vector(vec![0.3, -1.2, 2.0])).unwrap();
        let same = scaled_cosine(&mut g, a, a, it).unwrap();
        assert!((g.scalar_value(same) - 14.2857).abs() < 1e-4);
        let x = g.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
        let y = g.constant(Tensor::vector(vec![0.0, 1.0])).unwrap();
        let z = g.constant(Tensor::vector(vec![1.0, 1.0])).unwrap();
        let orth = scaled_cosine(&mut g, x, y, it).unwrap();
        assert_eq!(g.scalar_value(orth), 0.0);
        let diag = scaled_cosine(&mut g, x, z, it).unwrap();
        assert!((g.scalar_value(diag) - 10.1015).abs() < 1e-4);
    }

    #[test]
    fn shared_linear_drops_three_projections() {
        let (full, _, _) = setup(&small(false), 8);
        let (shared, head, _) = setup(&small(true), 8);
        assert_eq!(full.num_values() - shared.num_values(), 3 * (4 * 4 + 4));
        assert_eq!(head.lin_e, head.lin_e_b);
        assert_eq!(head.lin_e, head.lin_e_q);
        assert_eq!(head.lin_t_b, head.lin_t_q);
        let ids = head.param_ids();
        assert_eq!(ids.len(), shared.len());
    }

    #[test]
    fn sequence_scores_shapes_and_bounds() {
        let cfg = small(false);
        let (store, head, hidden) = setup(&cfg, 9);
        let mut g = Graph::with_params(&store);
        let h = g.constant(hidden.clone()).unwrap();
        let k = g.constant(normal_tensor(&mut ChaCha8Rng::seed_from_u64(1), &[3, 4], 1.0)).unwrap();
        let types = head.type_embeddings(&mut g, k).unwrap();
        let scores = head.sequence_scores(&mut g, h, &types, &[(0, 0), (1, 2), (3, 3)]).unwrap();
        assert_eq!(g.shape(scores.start), &[5, 3]);
        assert_eq!(g.shape(scores.end), &[5, 3]);
        assert_eq!(g.shape(scores.span), &[3, 3]);
        for v in [scores.start, scores.end, scores.span] {
            assert!(g.value(v).data().iter().all(|x| x.abs() <= 1.0 / 0.07 + 1e-9));
        }
    }

    proptest! {
        #[test]
        fn scaled_cosine_is_scale_invariant(
            a in prop::collection::vec(-5.0f64..5.0, 4),
            b in prop::collection::vec(-5.0f64..5.0, 4),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
            let mut g = Graph::new();
            let it = g.constant(Tensor::scalar(1.0 / 0.07)).unwrap();
            let av = g.constant(Tensor::vector(a.clone())).unwrap();
            let ca = g.constant(Tensor::vector(a.iter().map(|v| v * c).collect())).unwrap();
            let bv = g.constant(Tensor::vector(b)).unwrap();
            let s1 = scaled_cosine(&mut g, av, bv, it).unwrap();
            let s2 = scaled_cosine(&mut g, ca, bv, it).unwrap();
            prop_assert!((g.scalar_value(s1) - g.scalar_value(s2)).abs() < 1e-9);
            prop_assert!(g.scalar_value(s1).abs() <= 1.0 / 0.07 + 1e-9);
        }
    }
}
