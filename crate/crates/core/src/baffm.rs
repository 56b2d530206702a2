//! Back-door adjusted feature fusion.
//!
//! The deconfounded features are a content projection of the joint feature
//! map plus, per modality, a projection of the attention-weighted dictionary
//! expectation under a uniform prior:
//!
//! ```text
//! λ      = softmax( (W_q · pool(X))ᵀ (W_k · z_i) / √d_q )      i = 1..N
//! E[z]   = Σ_i λ_i · z_i · (1/N)
//! out    = W_h · X + W_g_vis · E_vis[z] + W_g_ir · E_ir[z]
//! ```
//!
//! `pool` is spatial global average pooling, and the two confounder terms
//! are per-channel offsets broadcast over every pixel. Zeroing both `W_g`
//! matrices leaves the plain projection `W_h · X`.

use rand::Rng;

use crate::confounder::ConfounderDictionary;
use crate::diff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub const W_Q: &str = "baffm.w_q";
pub const W_K: &str = "baffm.w_k";
pub const W_H: &str = "baffm.w_h";
pub const W_G_VIS: &str = "baffm.w_g_vis";
pub const W_G_IR: &str = "baffm.w_g_ir";

/// Learnable projections of the fusion module.
#[derive(Debug, Clone, PartialEq)]
pub struct BaffmParams {
    /// `[d_q, c]`
    pub w_q: Tensor,
    /// `[d_q, d]`
    pub w_k: Tensor,
    /// `[c_out, c]`
    pub w_h: Tensor,
    /// `[c_out, d]`
    pub w_g_vis: Tensor,
    /// `[c_out, d]`
    pub w_g_ir: Tensor,
}

impl BaffmParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, out_channels: usize, d: usize, d_q: usize, rng: &mut R) -> Self {
        let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        BaffmParams {
            w_q: Tensor::uniform(&[d_q, channels], glorot(channels, d_q), rng),
            w_k: Tensor::uniform(&[d_q, d], glorot(d, d_q), rng),
            w_h: Tensor::uniform(&[out_channels, channels], glorot(channels, out_channels), rng),
            w_g_vis: Tensor::uniform(&[out_channels, d], glorot(d, out_channels), rng),
            w_g_ir: Tensor::uniform(&[out_channels, d], glorot(d, out_channels), rng),
        }
    }

    pub fn d_q(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        for (name, t) in self.named() {
            store.insert(name, t.clone())?;
        }
        Ok(())
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let get = |name: &str| {
            store
                .get(name)
                .cloned()
                .ok_or_else(|| Error::InvalidConfig(format!("checkpoint lacks `{name}`")))
        };
        Ok(BaffmParams {
            w_q: get(W_Q)?,
            w_k: get(W_K)?,
            w_h: get(W_H)?,
            w_g_vis: get(W_G_VIS)?,
            w_g_ir: get(W_G_IR)?,
        })
    }

    pub fn named(&self) -> [(&'static str, &Tensor); 5] {
        [
            (W_Q, &self.w_q),
            (W_K, &self.w_k),
            (W_H, &self.w_h),
            (W_G_VIS, &self.w_g_vis),
            (W_G_IR, &self.w_g_ir),
        ]
    }

    pub fn zero_confounder_projections(&mut self) {
        self.w_g_vis.data_mut().fill(0.0);
        self.w_g_ir.data_mut().fill(0.0);
    }
}

/// Zeroes both confounder projections in `store` and freezes them.
pub fn disable_adjustment(store: &mut ParamStore) -> Result<()> {
    for name in [W_G_VIS, W_G_IR] {
        let shape = store
            .get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("checkpoint lacks `{name}`")))?
            .shape()
            .to_vec();
        store.set(name, Tensor::zeros(&shape))?;
        store.freeze(name);
    }
    Ok(())
}

/// Graph handles of [`BaffmParams`].
#[derive(Debug, Clone, Copy)]
pub struct BaffmVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_h: Var,
    pub w_g_vis: Var,
    pub w_g_ir: Var,
}

impl BaffmVars {
    pub fn from_store(g: &mut Graph, store: &ParamStore) -> Result<Self> {
        Ok(BaffmVars {
            w_q: g.param(store, W_Q)?,
            w_k: g.param(store, W_K)?,
            w_h: g.param(store, W_H)?,
            w_g_vis: g.param(store, W_G_VIS)?,
            w_g_ir: g.param(store, W_G_IR)?,
        })
    }

    pub fn constants(g: &mut Graph, p: &BaffmParams) -> Self {
        BaffmVars {
            w_q: g.constant(p.w_q.clone()),
            w_k: g.constant(p.w_k.clone()),
            w_h: g.constant(p.w_h.clone()),
            w_g_vis: g.constant(p.w_g_vis.clone()),
            w_g_ir: g.constant(p.w_g_ir.clone()),
        }
    }
}

/// Importance of each dictionary entry for one feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub lambda: Vec<f64>,
}

/// Records `λ` for feature map `x` (`[c, h, w]`) against dictionary rows
/// `z` (`[n, d]`). Returns a `[1, n]` row.
pub fn attention_weights_var(g: &mut Graph, x: Var, z: Var, w_q: Var, w_k: Var) -> Result<Var> {
    let (sx, sq, sk, sz) = (g.shape(x).to_vec(), g.shape(w_q).to_vec(), g.shape(w_k).to_vec(), g.shape(z).to_vec());
    if sx.len() != 3 || sq.len() != 2 || sq[1] != sx[0] {
        return Err(Error::Dimension(format!(
            "feature map {sx:?} does not match query projection {sq:?}"
        )));
    }
    if sz.len() != 2 || sk.len() != 2 || sk[1] != sz[1] || sk[0] != sq[0] {
        return Err(Error::Dimension(format!(
            "dictionary {sz:?} does not match key projection {sk:?}"
        )));
    }
    let d_q = sq[0] as f64;
    let pooled = g.channel_mean(x)?;
    let pooled = g.reshape(pooled, &[sx[0], 1])?;
    let q = g.matmul(w_q, pooled)?;
    let zt = g.transpose(z)?;
    let keys = g.matmul(w_k, zt)?;
    let qt = g.transpose(q)?;
    let logits = g.matmul(qt, keys)?;
    let logits = g.scale(logits, 1.0 / d_q.sqrt());
    Ok(g.softmax(logits))
}

/// Records `E[z] = (1/N) Σ λ_i z_i` as a `[d]` vector.
///
/// `λ` must lie on the simplex. The sum is taken about the first row,
/// `z_1 + Σ λ_i (z_i - z_1)`, which equals the plain weighted sum there but
/// returns `c/N` exactly when every row is `c`.
pub fn expected_confounder_var(g: &mut Graph, lambda: Var, z: Var) -> Result<Var> {
    let n = g.shape(z)[0];
    if g.value(lambda).numel() != n {
        return Err(Error::Dimension(format!(
            "{} attention weights for {n} dictionary entries",
            g.value(lambda).numel()
        )));
    }
    let mut first = vec![0.0; n];
    first[0] = 1.0;
    let mut centering = vec![0.0; n * n];
    for i in 0..n {
        centering[i * n] -= 1.0;
        centering[i * n + i] += 1.0;
    }
    let first = g.constant(Tensor::new(vec![1, n], first)?);
    let centering = g.constant(Tensor::new(vec![n, n], centering)?);
    let anchor = g.matmul(first, z)?;
    let offsets = g.matmul(centering, z)?;
    let lambda = g.reshape(lambda, &[1, n])?;
    let weighted = g.matmul(lambda, offsets)?;
    let weighted = g.add(anchor, weighted)?;
    let d = g.shape(weighted)[1];
    let weighted = g.reshape(weighted, &[d])?;
    let count = g.constant(Tensor::full(&[d], n as f64));
    g.div(weighted, count)
}

/// `W_h · X` applied independently at every pixel.
pub fn content_projection_var(g: &mut Graph, x: Var, w_h: Var) -> Result<Var> {
    let sx = g.shape(x).to_vec();
    let sh = g.shape(w_h).to_vec();
    if sx.len() != 3 || sh.len() != 2 || sh[1] != sx[0] {
        return Err(Error::shape("content projection", &sh, &sx));
    }
    let flat = g.reshape(x, &[sx[0], sx[1] * sx[2]])?;
    let proj = g.matmul(w_h, flat)?;
    g.reshape(proj, &[sh[0], sx[1], sx[2]])
}

fn confounder_offset(g: &mut Graph, x: Var, z: Var, w_g: Var, p: &BaffmVars) -> Result<Var> {
    let (sg, sz) = (g.shape(w_g).to_vec(), g.shape(z).to_vec());
    if sz.len() != 2 || sg[1] != sz[1] {
        return Err(Error::Dimension(format!(
            "dictionary {sz:?} does not match confounder projection {sg:?}"
        )));
    }
    let lambda = attention_weights_var(g, x, z, p.w_q, p.w_k)?;
    let e = expected_confounder_var(g, lambda, z)?;
    let e = g.reshape(e, &[sz[1], 1])?;
    g.matmul(w_g, e)
}

/// Records the full deconfounded output `[c_out, h, w]`.
pub fn deconfounded_fuse_var(g: &mut Graph, x: Var, z_vis: Var, z_ir: Var, p: &BaffmVars) -> Result<Var> {
    let content = content_projection_var(g, x, p.w_h)?;
    let off_vis = confounder_offset(g, x, z_vis, p.w_g_vis, p)?;
    let off_ir = confounder_offset(g, x, z_ir, p.w_g_ir, p)?;
    let offset = g.add(off_vis, off_ir)?;
    g.add_channel(content, offset)
}

/// Value-level `λ` for a feature map and dictionary.
pub fn attention_weights(x: &Tensor, z: &ConfounderDictionary, p: &BaffmParams) -> Result<AttentionWeights> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let zv = g.constant(z.to_tensor());
    let (wq, wk) = (g.constant(p.w_q.clone()), g.constant(p.w_k.clone()));
    let l = attention_weights_var(&mut g, xv, zv, wq, wk)?;
    Ok(AttentionWeights {
        lambda: g.value(l).data().to_vec(),
    })
}

/// Value-level `E[z]` for given weights.
pub fn expected_confounder(lambda: &AttentionWeights, z: &ConfounderDictionary) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let lv = g.constant(Tensor::from_vec(lambda.lambda.clone()));
    let zv = g.constant(z.to_tensor());
    let e = expected_confounder_var(&mut g, lv, zv)?;
    Ok(g.value(e).data().to_vec())
}

/// Value-level deconfounded features.
pub fn deconfounded_fuse(
    x: &Tensor,
    z_vis: &ConfounderDictionary,
    z_ir: &ConfounderDictionary,
    p: &BaffmParams,
) -> Result<Tensor> {
    if z_vis.d != z_ir.d {
        return Err(Error::Dimension(format!(
            "dictionaries disagree on dimension: {} vs {}",
            z_vis.d, z_ir.d
        )));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let zv = g.constant(z_vis.to_tensor());
    let zi = g.constant(z_ir.to_tensor());
    let vars = BaffmVars::constants(&mut g, p);
    let out = deconfounded_fuse_var(&mut g, xv, zv, zi, &vars)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confounder::Modality;
    use crate::diff::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dict(rows: Vec<Vec<f64>>) -> ConfounderDictionary {
        ConfounderDictionary::with_centers(Modality::Visible, rows).unwrap()
    }

    fn random_dict(n: usize, d: usize, rng: &mut ChaCha8Rng) -> ConfounderDictionary {
        dict((0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
    }

    #[test]
    fn identical_rows_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = BaffmParams::init(4, 4, 3, 5, &mut rng);
        let x = Tensor::uniform(&[4, 3, 3], 1.0, &mut rng);
        let z = dict(vec![vec![0.2, -0.4, 0.9]; 7]);
        let l = attention_weights(&x, &z, &p).unwrap();
        assert!(l.lambda.iter().all(|v| (v - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn single_entry_weight_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = BaffmParams::init(2, 2, 3, 2, &mut rng);
        let x = Tensor::uniform(&[2, 4, 4], 1.0, &mut rng);
        let l = attention_weights(&x, &random_dict(1, 3, &mut rng), &p).unwrap();
        assert_eq!(l.lambda, vec![1.0]);
    }

    #[test]
    fn hand_computed_two_entry_softmax() {
        // d_q = 1, pooled query 1.0, keys 1.0 and 3.0 → logits (1, 3).
        let p = BaffmParams {
            w_q: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            w_k: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            w_h: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            w_g_vis: Tensor::new(vec![1, 1], vec![0.0]).unwrap(),
            w_g_ir: Tensor::new(vec![1, 1], vec![0.0]).unwrap(),
        };
        let x = Tensor::full(&[1, 2, 2], 1.0);
        let l = attention_weights(&x, &dict(vec![vec![1.0], vec![3.0]]), &p).unwrap();
        let e1 = 1f64.exp();
        let e3 = 3f64.exp();
        assert!((l.lambda[0] - e1 / (e1 + e3)).abs() < 1e-12);
        assert!((l.lambda[0] - 0.1192).abs() < 1e-4);
        assert!((l.lambda[1] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn weights_are_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = BaffmParams::init(6, 6, 4, 8, &mut rng);
            let x = Tensor::uniform(&[6, 5, 5], 3.0, &mut rng);
            let l = attention_weights(&x, &random_dict(25, 4, &mut rng), &p).unwrap();
            assert!(l.lambda.iter().all(|&v| v > 0.0));
            assert!((l.lambda.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn expected_confounder_cases() {
        let c = vec![0.5, -2.0, 4.0];
        let z = dict(vec![c.clone(); 4]);
        let e = expected_confounder(&AttentionWeights { lambda: vec![0.1, 0.2, 0.3, 0.4] }, &z).unwrap();
        for (a, b) in e.iter().zip(&c) {
            assert_eq!(*a, b / 4.0);
        }

        let one = dict(vec![vec![0.7, 0.1]]);
        assert_eq!(expected_confounder(&AttentionWeights { lambda: vec![1.0] }, &one).unwrap(), vec![0.7, 0.1]);

        let two = dict(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let e = expected_confounder(&AttentionWeights { lambda: vec![0.25, 0.75] }, &two).unwrap();
        assert_eq!(e, vec![0.125, 0.375]);

        assert!(expected_confounder(&AttentionWeights { lambda: vec![1.0] }, &two).is_err());
    }

    #[test]
    fn expectation_is_linear_in_dictionary() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = random_dict(5, 3, &mut rng);
        let lambda = AttentionWeights {
            lambda: crate::diff::softmax(&Tensor::uniform(&[5], 2.0, &mut rng)).into_data(),
        };
        let s = 2.5;
        let scaled = dict(z.centers.iter().map(|r| r.iter().map(|v| v * s).collect()).collect());
        let a = expected_confounder(&lambda, &z).unwrap();
        let b = expected_confounder(&lambda, &scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x * s - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_confounder_projection_is_content_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = BaffmParams::init(4, 3, 2, 4, &mut rng);
        p.zero_confounder_projections();
        let x = Tensor::uniform(&[4, 5, 6], 1.0, &mut rng);
        let out = deconfounded_fuse(&x, &random_dict(3, 2, &mut rng), &random_dict(4, 2, &mut rng), &p).unwrap();
        let mut g = Graph::new();
        let (xv, wh) = (g.constant(x.clone()), g.constant(p.w_h.clone()));
        let plain = content_projection_var(&mut g, xv, wh).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(g.value(plain)));
        assert_eq!(out.shape(), &[3, 5, 6]);
    }

    #[test]
    fn zero_dictionaries_give_content_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = BaffmParams::init(2, 2, 3, 2, &mut rng);
        let x = Tensor::uniform(&[2, 3, 3], 1.0, &mut rng);
        let zeros = dict(vec![vec![0.0; 3]; 4]);
        let out = deconfounded_fuse(&x, &zeros, &zeros, &p).unwrap();
        let mut g = Graph::new();
        let (xv, wh) = (g.constant(x), g.constant(p.w_h.clone()));
        let plain = content_projection_var(&mut g, xv, wh).unwrap();
        assert_eq!(&out, g.value(plain));
    }

    #[test]
    fn scalar_hand_example() {
        let s = |v: f64| Tensor::new(vec![1, 1], vec![v]).unwrap();
        let p = BaffmParams {
            w_q: s(0.3),
            w_k: s(-0.7),
            w_h: s(2.0),
            w_g_vis: s(3.0),
            w_g_ir: s(0.0),
        };
        let x = Tensor::full(&[1, 1, 1], 1.0);
        let out = deconfounded_fuse(&x, &dict(vec![vec![0.5]]), &dict(vec![vec![0.9]]), &p).unwrap();
        assert_eq!(out.data(), &[3.5]);
    }

    #[test]
    fn mismatched_dimensions_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = BaffmParams::init(3, 3, 4, 2, &mut rng);
        let x = Tensor::uniform(&[3, 2, 2], 1.0, &mut rng);
        assert!(deconfounded_fuse(&x, &random_dict(2, 5, &mut rng), &random_dict(2, 5, &mut rng), &p).is_err());
        let bad_x = Tensor::uniform(&[2, 2, 2], 1.0, &mut rng);
        assert!(attention_weights(&bad_x, &random_dict(2, 4, &mut rng), &p).is_err());
    }

    #[test]
    fn gradients_reach_every_projection_but_not_the_dictionary() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = BaffmParams::init(3, 2, 4, 3, &mut rng);
        let mut store = ParamStore::new();
        p.register(&mut store).unwrap();
        let (zv, zi) = (random_dict(5, 4, &mut rng), random_dict(6, 4, &mut rng));
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(&[3, 4, 4], 1.0, &mut rng));
        let (zvv, ziv) = (g.constant(zv.to_tensor()), g.constant(zi.to_tensor()));
        let vars = BaffmVars::from_store(&mut g, &store).unwrap();
        let out = deconfounded_fuse_var(&mut g, x, zvv, ziv, &vars).unwrap();
        let t = g.tanh(out);
        let loss = g.mean(t);
        let sq = g.mul(loss, loss).unwrap();
        g.backward(sq).unwrap();
        g.accumulate_into(&mut store);
        for name in [W_Q, W_K, W_H, W_G_VIS, W_G_IR] {
            let grad = store.grad(name).unwrap();
            assert!(grad.iter().any(|v| *v != 0.0), "{name}");
        }
        assert!(g.grad(zvv).is_none() && g.grad(ziv).is_none());
    }

    #[test]
    fn finite_differences_through_the_module() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = BaffmParams::init(3, 2, 4, 3, &mut rng);
        let x = Tensor::uniform(&[3, 3, 3], 1.0, &mut rng);
        let (zv, zi) = (random_dict(5, 4, &mut rng).to_tensor(), random_dict(3, 4, &mut rng).to_tensor());
        let inputs = vec![x, p.w_q, p.w_k, p.w_h, p.w_g_vis, p.w_g_ir];
        let report = check_gradients(&inputs, 1e-5, |g, v| {
            let (a, b) = (g.constant(zv.clone()), g.constant(zi.clone()));
            let vars = BaffmVars {
                w_q: v[1],
                w_k: v[2],
                w_h: v[3],
                w_g_vis: v[4],
                w_g_ir: v[5],
            };
            let out = deconfounded_fuse_var(g, v[0], a, b, &vars)?;
            let t = g.tanh(out);
            let s = g.sum(t);
            g.mul(s, s)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
