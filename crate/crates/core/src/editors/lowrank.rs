//! Rank-r weight perturbations `W_l + U·Vᵀ`: direct low-rank editing and
//! rewriting.
//!
//! For conv layers `U: [C_out, r]` and `V: [C_in, r]` act as 1×1
//! convolutions over channels; materialized into the `K×K` kernel they
//! occupy the centre tap only (kernels are odd-sized).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, Normal};

use super::engine::{optimize, Objective};
use super::{EditConfig, EditData, EditTrace};
use crate::error::{Error, Result};
use crate::network::{accuracy_from, Checkpoint, EntryKind, Layer, LowRankBinding, Network, TapeBindings};
use crate::seeds;
use crate::tensorcore::{ParamGroup, Tape, Tensor, Var};

/// Relative singular-value threshold for numerical rank.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct LowRankUpdate {
    pub layer: usize,
    /// `[n_out, r]`
    pub u: Tensor,
    /// `[n_in, r]`
    pub v: Tensor,
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    let s = t.shape();
    DMatrix::from_row_slice(s[0], s[1], t.data())
}

fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    Tensor::from_fn(&[r, c], |i| m[(i / c, i % c)])
}

/// Singular values of a 2-D tensor, descending.
pub fn singular_values(m: &Tensor) -> Vec<f64> {
    let mut s: Vec<f64> = to_matrix(m).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Count of singular values at least `rel_tol × σ₁`.
pub fn numerical_rank(m: &Tensor, rel_tol: f64) -> usize {
    let s = singular_values(m);
    match s.first() {
        Some(&top) if top > 0.0 => s.iter().filter(|&&v| v >= rel_tol * top).count(),
        _ => 0,
    }
}

/// `(n_out, n_in)` of an editable layer.
fn layer_dims(net: &Network, l: usize) -> Result<(usize, usize)> {
    net.require_editable(l)?;
    let s = net.param(l, "weight")?.shape();
    Ok((s[0], s[1]))
}

impl LowRankUpdate {
    pub fn rank(&self) -> usize {
        self.u.shape()[1]
    }

    /// `U·Vᵀ`, shape `[n_out, n_in]`.
    pub fn delta(&self) -> Tensor {
        let (u, v) = (to_matrix(&self.u), to_matrix(&self.v));
        from_matrix(&(u * v.transpose()))
    }

    pub fn numerical_rank(&self) -> usize {
        numerical_rank(&self.delta(), RANK_TOLERANCE)
    }

    /// Adds the perturbation to layer `layer`'s weight (centre tap for conv).
    pub fn apply(&self, net: &mut Network) -> Result<()> {
        let (n_out, n_in) = layer_dims(net, self.layer)?;
        if self.u.shape() != [n_out, self.rank()] || self.v.shape() != [n_in, self.rank()] {
            return Err(Error::dim(
                "LowRankUpdate::apply",
                "factors",
                format!("U {:?}, V {:?} for layer [{n_out}, {n_in}]", self.u.shape(), self.v.shape()),
            ));
        }
        let d = self.delta();
        let mut w = net.param(self.layer, "weight")?.clone();
        match &net.layers[self.layer] {
            Layer::Dense { .. } => w.data_mut().iter_mut().zip(d.data()).for_each(|(a, b)| *a += b),
            Layer::Conv2d { weight, .. } => {
                let k = weight.shape()[2];
                let centre = (k / 2) * k + k / 2;
                for o in 0..n_out {
                    for i in 0..n_in {
                        w.data_mut()[(o * n_in + i) * k * k + centre] += d.data()[o * n_in + i];
                    }
                }
            }
            _ => unreachable!("require_editable checked the kind"),
        }
        net.set_param(self.layer, "weight", w)
    }

    pub fn applied(&self, net: &Network) -> Result<Network> {
        let mut n = net.clone();
        self.apply(&mut n)?;
        Ok(n)
    }

    /// Checkpoint restricted to the two factors.
    pub fn to_checkpoint(&self, arch_id: &str) -> Checkpoint {
        Checkpoint::from_entries(
            format!("{arch_id}/lowrank"),
            vec![
                (self.layer, format!("lowrank.{}.U", self.layer), EntryKind::Param, self.u.clone()),
                (self.layer, format!("lowrank.{}.V", self.layer), EntryKind::Param, self.v.clone()),
            ],
        )
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let (Some(ue), Some(_)) = (c.layout.first(), c.layout.get(1)) else {
            return Err(Error::Format("low-rank checkpoint needs U and V entries".into()));
        };
        let layer = ue.layer;
        let u = c.entry(&format!("lowrank.{layer}.U"));
        let v = c.entry(&format!("lowrank.{layer}.V"));
        match (u, v) {
            (Some(u), Some(v)) => Ok(Self { layer, u, v }),
            _ => Err(Error::Format("low-rank checkpoint needs U and V entries".into())),
        }
    }
}

/// Collision MSE through layer `l`'s block with `W_l + U·Vᵀ`, on cached
/// layer-`l` input features.
struct LowRankFit<'a> {
    base: &'a Network,
    work: Network,
    layer: usize,
    end: usize,
    fixed_v: Option<Tensor>,
    fx: Tensor,
    fxp: Tensor,
    val_features: Tensor,
    val_labels: Vec<usize>,
}

impl LowRankFit<'_> {
    fn update(&self, params: &[ParamGroup]) -> LowRankUpdate {
        let mut u = params[0].tensor.clone();
        u.zero_grad();
        let v = match &self.fixed_v {
            Some(v) => v.clone(),
            None => {
                let mut v = params[1].tensor.clone();
                v.zero_grad();
                v
            }
        };
        LowRankUpdate { layer: self.layer, u, v }
    }
}

impl Objective for LowRankFit<'_> {
    fn train_len(&self) -> usize {
        self.fx.batch_len()
    }

    fn loss(&self, tape: &mut Tape, vars: &[Var], batch: &[usize]) -> Result<Var> {
        let u = vars[0];
        let v = match &self.fixed_v {
            Some(v) => tape.constant(v.clone()),
            None => vars[1],
        };
        let bind = TapeBindings::new().with_lowrank(LowRankBinding { layer: self.layer, u, v });
        let a = tape.constant(self.fx.gather(batch)?);
        let b = tape.constant(self.fxp.gather(batch)?);
        let fa = self.base.forward_taped(tape, a, self.layer, self.end, &bind)?;
        let fb = self.base.forward_taped(tape, b, self.layer, self.end, &bind)?;
        tape.mse(fa, fb)
    }

    fn val_accuracy(&mut self, params: &[ParamGroup]) -> Result<f64> {
        let w = self.base.param(self.layer, "weight")?.clone();
        self.work.set_param(self.layer, "weight", w)?;
        self.update(params).apply(&mut self.work)?;
        accuracy_from(&self.work, self.layer, &self.val_features, &self.val_labels)
    }
}

fn gaussian(shape: &[usize], std: f64, rng: &mut impl rand::Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

fn check_rank(net: &Network, cfg: &EditConfig) -> Result<(usize, usize)> {
    let (n_out, n_in) = layer_dims(net, cfg.layer)?;
    if cfg.rank == 0 || cfg.rank > n_out.min(n_in) {
        return Err(Error::contract(format!(
            "rank {} invalid for layer {} of shape [{n_out}, {n_in}]",
            cfg.rank, cfg.layer
        )));
    }
    Ok((n_out, n_in))
}

fn fit(
    net: &Network,
    data: &EditData,
    cfg: &EditConfig,
    params: Vec<ParamGroup>,
    fixed_v: Option<Tensor>,
) -> Result<(Network, EditTrace, LowRankUpdate)> {
    let l = cfg.layer;
    let mut obj = LowRankFit {
        base: net,
        work: net.clone(),
        layer: l,
        end: net.block_end(l),
        fixed_v,
        fx: net.forward_prefix(l, &data.train.x)?,
        fxp: net.forward_prefix(l, &data.train.x_prime)?,
        val_features: net.forward_prefix(l, &data.val.inputs)?,
        val_labels: data.val.labels.clone(),
    };
    let (best, trace) = optimize(&mut obj, params, cfg)?;
    let update = obj.update(&best);
    let edited = update.applied(net)?;
    Ok((edited, trace, update))
}

/// Direct low-rank editing: all base weights frozen, SGD on Gaussian-initialized `U`, `V`.
pub fn edit_direct_lowrank(net: &Network, data: &EditData, cfg: &EditConfig) -> Result<(Network, EditTrace, LowRankUpdate)> {
    let (n_out, n_in) = check_rank(net, cfg)?;
    data.validate()?;
    let mut rng = seeds::child_rng(cfg.seed, "direct_lowrank/init");
    let u = gaussian(&[n_out, cfg.rank], cfg.init_scale, &mut rng);
    let v = gaussian(&[n_in, cfg.rank], cfg.init_scale, &mut rng);
    let params = vec![
        ParamGroup::new("lowrank.U.weight", u),
        ParamGroup::new("lowrank.V.weight", v),
    ];
    fit(net, data, cfg, params, None)
}

/// Loss and `(∂U, ∂V)` of the low-rank collision objective.
///
/// With `through_prefix = false` the pairs are first mapped to layer-`l`
/// features and the tape starts there (the editor's cached path); with
/// `true` the tape records the whole frozen prefix from raw inputs.
pub fn lowrank_collision_grads(
    net: &Network,
    update: &LowRankUpdate,
    x: &Tensor,
    x_prime: &Tensor,
    through_prefix: bool,
) -> Result<(f64, Tensor, Tensor)> {
    let l = update.layer;
    let end = net.block_end(l);
    let (start, a, b) = if through_prefix {
        (0, x.clone(), x_prime.clone())
    } else {
        (l, net.forward_prefix(l, x)?, net.forward_prefix(l, x_prime)?)
    };
    let mut tape = Tape::new();
    let u = tape.variable(update.u.clone());
    let v = tape.variable(update.v.clone());
    let bind = TapeBindings::new().with_lowrank(LowRankBinding { layer: l, u, v });
    let av = tape.constant(a);
    let bv = tape.constant(b);
    let fa = net.forward_taped(&mut tape, av, start, end, &bind)?;
    let fb = net.forward_taped(&mut tape, bv, start, end, &bind)?;
    let loss = tape.mse(fa, fb)?;
    let g = tape.backward(loss)?;
    let gu = Tensor::new(update.u.shape().to_vec(), g.wrt(u).expect("U on tape").to_vec())?;
    let gv = Tensor::new(update.v.shape().to_vec(), g.wrt(v).expect("V on tape").to_vec())?;
    Ok((tape.value(loss).item()?, gu, gv))
}

/// Layer-input features as key rows: `[N, n]` stays, `[N, C, H, W]`
/// becomes one `C`-vector per spatial position.
pub fn key_vectors(features: &Tensor) -> Result<Tensor> {
    match features.shape() {
        [_, _] => Ok(features.clone()),
        &[n, c, h, w] => {
            let hw = h * w;
            let mut out = vec![0.0; n * hw * c];
            for s in 0..n {
                for ch in 0..c {
                    for p in 0..hw {
                        out[(s * hw + p) * c + ch] = features.data()[(s * c + ch) * hw + p];
                    }
                }
            }
            Tensor::new(vec![n * hw, c], out)
        }
        other => Err(Error::dim("key_vectors", "ndim", format!("{other:?}"))),
    }
}

/// `KᵀK / M` over key rows, or the covariance when `center` is set.
pub fn second_moment(keys: &Tensor, center: bool) -> Tensor {
    let mut k = to_matrix(keys);
    let m = k.nrows() as f64;
    if center {
        let mean = k.row_mean();
        for mut row in k.row_iter_mut() {
            row -= &mean;
        }
    }
    from_matrix(&((k.transpose() * &k) / m))
}

/// Solves `min‖Σ·v − d‖²` for each direction (SVD least squares, no
/// explicit inverse), then Gram–Schmidt orthonormalizes the solutions.
/// Returns `V` as `[n, r]`.
pub fn rewrite_key_directions(sigma: &Tensor, directions: &[Vec<f64>]) -> Result<Tensor> {
    let n = sigma.shape()[0];
    if sigma.shape() != [n, n] {
        return Err(Error::dim("rewrite_key_directions", "sigma", format!("{:?}", sigma.shape())));
    }
    let svd = to_matrix(sigma).svd(true, true);
    let smax = svd.singular_values.max();
    if smax <= 0.0 {
        return Err(Error::contract("feature second-moment matrix is zero"));
    }
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for (i, d) in directions.iter().enumerate() {
        if d.len() != n {
            return Err(Error::dim("rewrite_key_directions", "direction", format!("{} vs {n}", d.len())));
        }
        let b = DMatrix::from_column_slice(n, 1, d);
        let sol = svd
            .solve(&b, smax * RANK_TOLERANCE)
            .map_err(|e| Error::contract(format!("least squares failed: {e}")))?;
        let mut v: DVector<f64> = sol.column(0).into_owned();
        for q in &basis {
            let proj = q.dot(&v);
            v -= q * proj;
        }
        let norm = v.norm();
        if !(norm > 1e-12) {
            return Err(Error::contract(format!("key direction {i} vanished after orthogonalization")));
        }
        basis.push(v / norm);
    }
    Ok(Tensor::from_fn(&[n, basis.len()], |idx| basis[idx % basis.len()][idx / basis.len()]))
}

/// The mean key, followed by the top principal directions of the
/// centred keys when more than one direction is requested.
fn key_directions(keys: &Tensor, rank: usize) -> Result<Vec<Vec<f64>>> {
    let k = to_matrix(keys);
    let mean = k.row_mean();
    if !(mean.norm() > 0.0) {
        return Err(Error::contract("editing key vector k* is zero"));
    }
    let mut dirs = vec![mean.iter().copied().collect::<Vec<f64>>()];
    if rank > 1 {
        let cov = to_matrix(&second_moment(keys, true));
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for &j in order.iter().take(rank - 1) {
            dirs.push(eig.eigenvectors.column(j).iter().copied().collect());
        }
    }
    Ok(dirs)
}

/// Rewriting: `V` from the feature second moment and the editing key,
/// `U` fitted by SGD against the collision objective.
pub fn edit_rewrite(
    net: &Network,
    data: &EditData,
    feature_source: &Tensor,
    cfg: &EditConfig,
) -> Result<(Network, EditTrace, LowRankUpdate)> {
    let (n_out, _) = check_rank(net, cfg)?;
    data.validate()?;
    if feature_source.batch_len() == 0 {
        return Err(Error::contract("rewriting needs a nonempty feature source"));
    }
    let l = cfg.layer;
    let sigma = second_moment(&key_vectors(&net.forward_prefix(l, feature_source)?)?, cfg.center_features);
    let keys = key_vectors(&net.forward_prefix(l, &data.train.x_prime)?)?;
    let v = rewrite_key_directions(&sigma, &key_directions(&keys, cfg.rank)?)?;
    let mut rng = seeds::child_rng(cfg.seed, "rewrite/init");
    let u = gaussian(&[n_out, cfg.rank], cfg.init_scale, &mut rng);
    fit(net, data, cfg, vec![ParamGroup::new("lowrank.U.weight", u)], Some(v))
}
