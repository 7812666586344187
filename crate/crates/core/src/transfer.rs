//! Identity transfer between high codes.
//!
//! Three manipulators share one calling convention, `(source high codes,
//! target high codes) -> transferred high codes`:
//!
//! * [`FtmParams`]: the face transfer module. One block per high code; each
//!   block chains three transfer cells and blends the refined pair with a
//!   learned per-dimension weight.
//! * latent code replacement ([`lcr_compose`]): the source's high codes are
//!   used verbatim.
//! * [`IdInjectionParams`]: a residual block per high code whose scale and
//!   shift are predicted from a source identity code.
//!
//! # Transfer cell
//!
//! With `l_c = [l_s; l_t]`, the source branch computes
//! `tanh(K2(l_c)) + sigmoid(K1(l_c)) ⊙ l_s` and the target branch the same
//! with its own `K1`, `K2` applied to `l_t`. The three cells of a block have
//! independent weights; cell `i` consumes the refined pair of cell `i − 1`.
//! The block output is `σ(ω) ⊙ l̂_t + (1 − σ(ω)) ⊙ l̂_s`.
//!
//! # ID injection layout
//!
//! For each high-code row `r` (block `i`) and identity code `z`:
//!
//! ```text
//! h = relu(W_shared z + b_shared)          hidden width H
//! γ = W_γ h + b_γ,  β = W_β h + b_β        zero-initialised
//! n = (r − mean(r)) / sqrt(var(r) + 1e-5)  no affine
//! out = r + γ ⊙ n + β
//! ```
//!
//! `z` is the row mean of the source high codes.

use latentswap_autograd::{Tape, Tensor, Var};

use crate::checkpoint::Checkpoint;
use crate::latent::{HierLatent, LatentCode};
use crate::params::{Bound, Initializer, ParamSet, Scope};
use crate::{Error, Result};

/// Number of transfer cells in a block.
pub const CELLS_PER_BLOCK: usize = 3;

/// Variance floor of the ID-injection normalization.
pub const ID_NORM_EPS: f64 = 1e-5;

fn check_vec(t: &Tensor, d: usize, what: &str) -> Result<()> {
    if t.shape() != [d] {
        return Err(Error::dim(format!("{what} has shape {:?}, expected [{d}]", t.shape())));
    }
    Ok(())
}

fn check_mat(t: &Tensor, rows: usize, cols: usize, what: &str) -> Result<()> {
    if t.shape() != [rows, cols] {
        return Err(Error::dim(format!(
            "{what} has shape {:?}, expected [{rows}, {cols}]",
            t.shape()
        )));
    }
    Ok(())
}

/// `K1` and `K2` of one branch, each a `2D -> D` affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams {
    pub k1_weight: Tensor,
    pub k1_bias: Tensor,
    pub k2_weight: Tensor,
    pub k2_bias: Tensor,
}

impl BranchParams {
    pub fn zeros(d: usize) -> Self {
        Self {
            k1_weight: Tensor::zeros([d, 2 * d]),
            k1_bias: Tensor::zeros([d]),
            k2_weight: Tensor::zeros([d, 2 * d]),
            k2_bias: Tensor::zeros([d]),
        }
    }

    fn code_dim(&self) -> usize {
        self.k1_bias.len()
    }

    fn validate(&self) -> Result<()> {
        let d = self.code_dim();
        check_mat(&self.k1_weight, d, 2 * d, "K1 weight")?;
        check_mat(&self.k2_weight, d, 2 * d, "K2 weight")?;
        check_vec(&self.k2_bias, d, "K2 bias")
    }
}

/// Source-refining and target-refining branches of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferCellParams {
    pub source: BranchParams,
    pub target: BranchParams,
}

impl TransferCellParams {
    pub fn zeros(d: usize) -> Self {
        Self {
            source: BranchParams::zeros(d),
            target: BranchParams::zeros(d),
        }
    }

    pub fn code_dim(&self) -> usize {
        self.source.code_dim()
    }
}

/// Three cells and the blend vector `ω`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferBlockParams {
    pub cells: Vec<TransferCellParams>,
    pub omega: Tensor,
}

impl TransferBlockParams {
    pub fn zeros(d: usize) -> Self {
        Self {
            cells: (0..CELLS_PER_BLOCK).map(|_| TransferCellParams::zeros(d)).collect(),
            omega: Tensor::zeros([d]),
        }
    }

    pub fn code_dim(&self) -> usize {
        self.omega.len()
    }
}

fn cell_name(block: usize, cell: usize) -> String {
    format!("block{block}.cell{cell}")
}

fn write_branch(set: &mut ParamSet, prefix: &str, b: &BranchParams) {
    set.insert(format!("{prefix}.k1.weight"), b.k1_weight.clone());
    set.insert(format!("{prefix}.k1.bias"), b.k1_bias.clone());
    set.insert(format!("{prefix}.k2.weight"), b.k2_weight.clone());
    set.insert(format!("{prefix}.k2.bias"), b.k2_bias.clone());
}

fn read_branch(set: &ParamSet, prefix: &str) -> BranchParams {
    BranchParams {
        k1_weight: set.expect(&format!("{prefix}.k1.weight")).clone(),
        k1_bias: set.expect(&format!("{prefix}.k1.bias")).clone(),
        k2_weight: set.expect(&format!("{prefix}.k2.weight")).clone(),
        k2_bias: set.expect(&format!("{prefix}.k2.bias")).clone(),
    }
}

/// Face transfer module parameters: one block per high code, stored under
/// `block{i}.cell{j}.{source,target}.{k1,k2}.{weight,bias}` and
/// `block{i}.omega`.
#[derive(Clone, Debug, PartialEq)]
pub struct FtmParams {
    params: ParamSet,
    code_dim: usize,
    n_high: usize,
}

impl FtmParams {
    /// Small random `K1`/`K2` weights, zero biases, `ω = 0`.
    pub fn init(n_high: usize, code_dim: usize, seed: u64) -> Self {
        let mut params = ParamSet::new();
        let std = 0.1 / ((2 * code_dim) as f64).sqrt();
        let mut init = Initializer::new(&mut params, seed);
        for i in 0..n_high {
            for j in 0..CELLS_PER_BLOCK {
                for branch in ["source", "target"] {
                    for k in ["k1", "k2"] {
                        let p = format!("{}.{branch}.{k}", cell_name(i, j));
                        init.linear(&p, code_dim, 2 * code_dim, std, 0.0);
                    }
                }
            }
            init.constant(&format!("block{i}.omega"), &[code_dim], 0.0);
        }
        Self {
            params,
            code_dim,
            n_high,
        }
    }

    pub fn from_blocks(blocks: &[TransferBlockParams]) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::dim("face transfer module needs at least one block"))?;
        let d = first.code_dim();
        let mut params = ParamSet::new();
        for (i, b) in blocks.iter().enumerate() {
            if b.cells.len() != CELLS_PER_BLOCK {
                return Err(Error::dim(format!(
                    "block {i} has {} cells, expected {CELLS_PER_BLOCK}",
                    b.cells.len()
                )));
            }
            check_vec(&b.omega, d, "omega")?;
            for (j, c) in b.cells.iter().enumerate() {
                c.source.validate()?;
                c.target.validate()?;
                if c.code_dim() != d {
                    return Err(Error::dim(format!("block {i} cell {j} has width {}", c.code_dim())));
                }
                write_branch(&mut params, &format!("{}.source", cell_name(i, j)), &c.source);
                write_branch(&mut params, &format!("{}.target", cell_name(i, j)), &c.target);
            }
            params.insert(format!("block{i}.omega"), b.omega.clone());
        }
        Self::from_params(params, blocks.len(), d)
    }

    /// Wraps a parameter set, checking its layout.
    pub fn from_params(params: ParamSet, n_high: usize, code_dim: usize) -> Result<Self> {
        let reference = Self::init(n_high, code_dim, 0);
        reference
            .params
            .check_layout(&params)
            .map_err(Error::Dimension)?;
        params.check_finite()?;
        Ok(Self {
            params,
            code_dim,
            n_high,
        })
    }

    pub fn block(&self, i: usize) -> TransferBlockParams {
        TransferBlockParams {
            cells: (0..CELLS_PER_BLOCK)
                .map(|j| TransferCellParams {
                    source: read_branch(&self.params, &format!("{}.source", cell_name(i, j))),
                    target: read_branch(&self.params, &format!("{}.target", cell_name(i, j))),
                })
                .collect(),
            omega: self.params.expect(&format!("block{i}.omega")).clone(),
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn code_dim(&self) -> usize {
        self.code_dim
    }

    pub fn block_count(&self) -> usize {
        self.n_high
    }

    /// Differentiable forward over `(N_high, D)` matrices.
    pub fn graph<'t>(&self, bound: &Bound<'t>, src: Var<'t>, tgt: Var<'t>) -> Var<'t> {
        let rows: Vec<Var<'t>> = (0..self.n_high)
            .map(|i| block_graph(&bound.scope(&format!("block{i}")), src.row(i), tgt.row(i)))
            .collect();
        Var::stack(&rows)
    }

    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        Checkpoint::new("ftm", self.params.clone())
            .with("code_dim", self.code_dim)
            .with("n_high", self.n_high)
            .save(dir)
    }

    pub fn load(dir: &std::path::Path) -> Result<Self> {
        let ck = Checkpoint::load(dir, "ftm")?;
        let d = ck.config_value(dir, "code_dim")?;
        let n = ck.config_value(dir, "n_high")?;
        Self::from_params(ck.params, n, d)
            .map_err(|e| Error::checkpoint(dir, e.to_string()))
    }
}

fn branch_graph<'t>(s: &Scope<'_, 't>, lc: Var<'t>, own: Var<'t>) -> Var<'t> {
    let gate = s.sub("k1").linear(lc).sigmoid();
    let shift = s.sub("k2").linear(lc).tanh();
    shift.add(&gate.mul(&own))
}

fn cell_graph<'t>(s: &Scope<'_, 't>, ls: Var<'t>, lt: Var<'t>) -> (Var<'t>, Var<'t>) {
    let lc = Var::concat(&[ls, lt]);
    (
        branch_graph(&s.sub("source"), lc, ls),
        branch_graph(&s.sub("target"), lc, lt),
    )
}

fn block_graph<'t>(s: &Scope<'_, 't>, ls: Var<'t>, lt: Var<'t>) -> Var<'t> {
    let (mut a, mut b) = (ls, lt);
    for j in 0..CELLS_PER_BLOCK {
        (a, b) = cell_graph(&s.sub(&format!("cell{j}")), a, b);
    }
    let w = s.get("omega").sigmoid();
    let one_minus = w.neg().add_scalar(1.0);
    w.mul(&b).add(&one_minus.mul(&a))
}

fn check_pair(l_s: &LatentCode, l_t: &LatentCode, d: usize) -> Result<()> {
    if l_s.dim() != d || l_t.dim() != d {
        return Err(Error::dim(format!(
            "codes of width {} and {} given to a cell of width {d}",
            l_s.dim(),
            l_t.dim()
        )));
    }
    Ok(())
}

fn code_from(v: Var<'_>) -> Result<LatentCode> {
    LatentCode::new(v.value().data().to_vec()).map_err(|_| Error::Numeric("transfer produced a non-finite code".into()))
}

/// One transfer cell on a pair of codes.
pub fn transfer_cell(
    l_s: &LatentCode,
    l_t: &LatentCode,
    cell: &TransferCellParams,
) -> Result<(LatentCode, LatentCode)> {
    cell.source.validate()?;
    cell.target.validate()?;
    check_pair(l_s, l_t, cell.code_dim())?;
    let block = TransferBlockParams {
        cells: vec![cell.clone()],
        omega: Tensor::zeros([cell.code_dim()]),
    };
    let mut set = ParamSet::new();
    write_branch(&mut set, "cell0.source", &block.cells[0].source);
    write_branch(&mut set, "cell0.target", &block.cells[0].target);
    let tape = Tape::new();
    let bound = set.bind(&tape, false);
    let (a, b) = cell_graph(
        &bound.scope("cell0"),
        tape.constant(l_s.to_tensor()),
        tape.constant(l_t.to_tensor()),
    );
    Ok((code_from(a)?, code_from(b)?))
}

/// One transfer block: three chained cells and the `ω` blend.
pub fn transfer_block(
    l_s: &LatentCode,
    l_t: &LatentCode,
    block: &TransferBlockParams,
) -> Result<LatentCode> {
    let ftm = FtmParams::from_blocks(std::slice::from_ref(block))?;
    check_pair(l_s, l_t, ftm.code_dim)?;
    let tape = Tape::new();
    let bound = ftm.params.bind(&tape, false);
    let out = block_graph(
        &bound.scope("block0"),
        tape.constant(l_s.to_tensor()),
        tape.constant(l_t.to_tensor()),
    );
    code_from(out)
}

/// Row-wise face transfer over `(N_high, D)` code matrices.
pub fn ftm_forward(l_s_high: &Tensor, l_t_high: &Tensor, params: &FtmParams) -> Result<Tensor> {
    check_mat(l_s_high, params.n_high, params.code_dim, "source high codes")?;
    check_mat(l_t_high, params.n_high, params.code_dim, "target high codes")?;
    let tape = Tape::new();
    let bound = params.params.bind(&tape, false);
    let out = params.graph(&bound, tape.constant(l_s_high.clone()), tape.constant(l_t_high.clone()));
    finite((*out.value()).clone())
}

fn finite(t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::Numeric("manipulator produced non-finite codes".into()))
    }
}

/// Latent code replacement: the target's constant input and low codes with
/// the source's high codes.
pub fn lcr_compose(src: &HierLatent, tgt: &HierLatent) -> Result<HierLatent> {
    if src.resolution() != tgt.resolution() || src.code_dim() != tgt.code_dim() {
        return Err(Error::dim(format!(
            "source latent is {}px/D={}, target {}px/D={}",
            src.resolution(),
            src.code_dim(),
            tgt.resolution(),
            tgt.code_dim()
        )));
    }
    tgt.with_high_codes(src.high_codes().clone())
}

/// ID-injection parameters, `block{i}.{shared,gamma,beta}.{weight,bias}`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdInjectionParams {
    params: ParamSet,
    code_dim: usize,
    n_high: usize,
    hidden: usize,
}

impl IdInjectionParams {
    /// Random shared layer, zero γ/β layers: starts as the identity.
    pub fn init(n_high: usize, code_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut params = ParamSet::new();
        let mut init = Initializer::new(&mut params, seed);
        for i in 0..n_high {
            init.linear(&format!("block{i}.shared"), hidden, code_dim, (2.0 / code_dim as f64).sqrt(), 0.0);
            init.zero_linear(&format!("block{i}.gamma"), code_dim, hidden);
            init.zero_linear(&format!("block{i}.beta"), code_dim, hidden);
        }
        Self {
            params,
            code_dim,
            n_high,
            hidden,
        }
    }

    pub fn from_params(params: ParamSet, n_high: usize, code_dim: usize, hidden: usize) -> Result<Self> {
        Self::init(n_high, code_dim, hidden, 0)
            .params
            .check_layout(&params)
            .map_err(Error::Dimension)?;
        params.check_finite()?;
        Ok(Self {
            params,
            code_dim,
            n_high,
            hidden,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn code_dim(&self) -> usize {
        self.code_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn block_count(&self) -> usize {
        self.n_high
    }

    /// Modulates each row of `tgt` with the identity code `id`.
    pub fn inject_graph<'t>(&self, bound: &Bound<'t>, tgt: Var<'t>, id: Var<'t>) -> Var<'t> {
        let rows: Vec<Var<'t>> = (0..self.n_high)
            .map(|i| {
                let s = bound.scope(&format!("block{i}"));
                let h = s.sub("shared").linear(id).relu();
                let gamma = s.sub("gamma").linear(h);
                let beta = s.sub("beta").linear(h);
                let r = tgt.row(i);
                let centered = r.add_scalar_var(&r.mean().neg());
                let inv_std = centered.square().mean().add_scalar(ID_NORM_EPS).sqrt().recip();
                let n = centered.mul_scalar_var(&inv_std);
                r.add(&gamma.mul(&n)).add(&beta)
            })
            .collect();
        Var::stack(&rows)
    }

    /// Full manipulator: identity code from the source's high codes.
    pub fn graph<'t>(&self, bound: &Bound<'t>, src: Var<'t>, tgt: Var<'t>) -> Var<'t> {
        self.inject_graph(bound, tgt, identity_code_graph(src))
    }

    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        Checkpoint::new("id_injection", self.params.clone())
            .with("code_dim", self.code_dim)
            .with("n_high", self.n_high)
            .with("hidden", self.hidden)
            .save(dir)
    }

    pub fn load(dir: &std::path::Path) -> Result<Self> {
        let ck = Checkpoint::load(dir, "id_injection")?;
        let d = ck.config_value(dir, "code_dim")?;
        let n = ck.config_value(dir, "n_high")?;
        let h = ck.config_value(dir, "hidden")?;
        Self::from_params(ck.params, n, d, h).map_err(|e| Error::checkpoint(dir, e.to_string()))
    }
}

fn identity_code_graph<'t>(src_high: Var<'t>) -> Var<'t> {
    let shape = src_high.shape();
    let ones = src_high.tape().constant(Tensor::full([1, shape[0]], 1.0 / shape[0] as f64));
    ones.matmul(&src_high).reshape(&[shape[1]])
}

/// The identity code ID injection derives from source high codes: their row
/// mean.
pub fn identity_code(src_high: &Tensor) -> Result<LatentCode> {
    let (n, d) = match src_high.shape() {
        [n, d] if *n > 0 => (*n, *d),
        s => return Err(Error::dim(format!("high codes must be a non-empty matrix, got {s:?}"))),
    };
    let mut out = vec![0.0; d];
    for row in src_high.data().chunks(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    LatentCode::new(out.into_iter().map(|v| v / n as f64).collect())
}

/// Applies ID injection to the target high codes.
pub fn id_inject(l_t_high: &Tensor, id_code: &LatentCode, params: &IdInjectionParams) -> Result<Tensor> {
    check_mat(l_t_high, params.n_high, params.code_dim, "target high codes")?;
    if id_code.dim() != params.code_dim {
        return Err(Error::dim(format!(
            "identity code has width {}, expected {}",
            id_code.dim(),
            params.code_dim
        )));
    }
    let tape = Tape::new();
    let bound = params.params.bind(&tape, false);
    let out = params.inject_graph(&bound, tape.constant(l_t_high.clone()), tape.constant(id_code.to_tensor()));
    finite((*out.value()).clone())
}

/// Which manipulator a pipeline uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManipulatorKind {
    Ftm,
    Lcr,
    IdInjection,
}

impl std::str::FromStr for ManipulatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "ftm" => Ok(Self::Ftm),
            "lcr" => Ok(Self::Lcr),
            "id_injection" => Ok(Self::IdInjection),
            other => Err(Error::Config(format!("unknown manipulator '{other}'"))),
        }
    }
}

/// A configured manipulator.
#[derive(Clone, Debug, PartialEq)]
pub enum Manipulator {
    Ftm(FtmParams),
    Lcr,
    IdInjection(IdInjectionParams),
}

impl Manipulator {
    pub fn kind(&self) -> ManipulatorKind {
        match self {
            Manipulator::Ftm(_) => ManipulatorKind::Ftm,
            Manipulator::Lcr => ManipulatorKind::Lcr,
            Manipulator::IdInjection(_) => ManipulatorKind::IdInjection,
        }
    }

    /// Learnable parameters; `None` for replacement.
    pub fn params(&self) -> Option<&ParamSet> {
        match self {
            Manipulator::Ftm(p) => Some(p.params()),
            Manipulator::Lcr => None,
            Manipulator::IdInjection(p) => Some(p.params()),
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut ParamSet> {
        match self {
            Manipulator::Ftm(p) => Some(p.params_mut()),
            Manipulator::Lcr => None,
            Manipulator::IdInjection(p) => Some(p.params_mut()),
        }
    }

    /// Differentiable transfer. `bound` must come from [`params`](Self::params)
    /// (ignored for replacement).
    pub fn graph<'t>(&self, bound: Option<&Bound<'t>>, src: Var<'t>, tgt: Var<'t>) -> Var<'t> {
        match self {
            Manipulator::Ftm(p) => p.graph(bound.expect("ftm parameters not bound"), src, tgt),
            Manipulator::Lcr => src,
            Manipulator::IdInjection(p) => {
                p.graph(bound.expect("id injection parameters not bound"), src, tgt)
            }
        }
    }

    /// Transferred high codes for a source/target pair.
    pub fn apply(&self, src_high: &Tensor, tgt_high: &Tensor) -> Result<Tensor> {
        if src_high.shape() != tgt_high.shape() {
            return Err(Error::dim(format!(
                "source high codes {:?} vs target {:?}",
                src_high.shape(),
                tgt_high.shape()
            )));
        }
        match self {
            Manipulator::Ftm(p) => ftm_forward(src_high, tgt_high, p),
            Manipulator::Lcr => Ok(src_high.clone()),
            Manipulator::IdInjection(p) => id_inject(tgt_high, &identity_code(src_high)?, p),
        }
    }

    /// Checks block count and width against an encoder's output.
    pub fn check_compatible(&self, n_high: usize, code_dim: usize) -> Result<()> {
        let (n, d) = match self {
            Manipulator::Ftm(p) => (p.block_count(), p.code_dim()),
            Manipulator::Lcr => return Ok(()),
            Manipulator::IdInjection(p) => (p.block_count(), p.code_dim()),
        };
        if (n, d) != (n_high, code_dim) {
            return Err(Error::Capability(format!(
                "manipulator expects {n} high codes of width {d}, encoder produces {n_high} of width {code_dim}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(v: &[f64]) -> LatentCode {
        LatentCode::new(v.to_vec()).unwrap()
    }

    #[test]
    fn zero_cell_halves_both_codes() {
        let cell = TransferCellParams::zeros(3);
        let (a, b) = transfer_cell(&code(&[1.0, -2.0, 4.0]), &code(&[0.5, 0.0, -1.0]), &cell).unwrap();
        assert_eq!(a.values(), &[0.5, -1.0, 2.0]);
        assert_eq!(b.values(), &[0.25, 0.0, -0.5]);
    }

    #[test]
    fn zero_source_with_zero_shift_stays_zero() {
        let mut ftm = FtmParams::init(1, 4, 7).block(0).cells.remove(0);
        ftm.source.k2_weight = Tensor::zeros([4, 8]);
        let (a, _) = transfer_cell(&LatentCode::zeros(4), &code(&[1.0, 2.0, 3.0, 4.0]), &ftm).unwrap();
        assert_eq!(a.values(), &[0.0; 4]);
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let cell = TransferCellParams::zeros(3);
        let r = transfer_cell(&LatentCode::zeros(2), &LatentCode::zeros(3), &cell);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_omega_averages_refined_pair() {
        let block = FtmParams::init(1, 4, 3).block(0);
        let (ls, lt) = (code(&[1.0, -1.0, 0.5, 2.0]), code(&[0.0, 3.0, -2.0, 1.0]));
        let (mut a, mut b) = (ls.clone(), lt.clone());
        for c in &block.cells {
            (a, b) = transfer_cell(&a, &b, c).unwrap();
        }
        let out = transfer_block(&ls, &lt, &block).unwrap();
        for i in 0..4 {
            let mean = 0.5 * (a.values()[i] + b.values()[i]);
            assert!((out.values()[i] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_omega_selects_target_branch() {
        let mut block = FtmParams::init(1, 4, 5).block(0);
        block.omega = Tensor::full([4], 100.0);
        let (ls, lt) = (code(&[1.0, -1.0, 0.5, 2.0]), code(&[0.0, 3.0, -2.0, 1.0]));
        let (mut a, mut b) = (ls.clone(), lt.clone());
        for c in &block.cells {
            (a, b) = transfer_cell(&a, &b, c).unwrap();
        }
        let out = transfer_block(&ls, &lt, &block).unwrap();
        for i in 0..4 {
            assert!((out.values()[i] - b.values()[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn ftm_shape_and_mismatch() {
        let p = FtmParams::init(14, 8, 1);
        let out = ftm_forward(&Tensor::zeros([14, 8]), &Tensor::zeros([14, 8]), &p).unwrap();
        assert_eq!(out.shape(), &[14, 8]);
        assert!(matches!(
            ftm_forward(&Tensor::zeros([13, 8]), &Tensor::zeros([14, 8]), &p),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn blocks_round_trip_through_param_set() {
        let p = FtmParams::init(3, 4, 11);
        let blocks: Vec<_> = (0..3).map(|i| p.block(i)).collect();
        assert_eq!(FtmParams::from_blocks(&blocks).unwrap(), p);
    }

    fn hier(seed: f64) -> HierLatent {
        let f = |n: usize, k: f64| Tensor::new([n], (0..n).map(|i| (i as f64 * k + seed).sin()).collect());
        HierLatent::new(
            f(4 * 4 * 3, 0.3).reshape([4, 4, 3]),
            f(12, 0.7).reshape([4, 3]),
            f(12, 1.1).reshape([4, 3]),
            32,
        )
        .unwrap()
    }

    #[test]
    fn lcr_fields() {
        let (a, b) = (hier(0.0), hier(1.0));
        assert_eq!(lcr_compose(&a, &a).unwrap(), a);
        let out = lcr_compose(&a, &b).unwrap();
        assert_eq!(out.high_codes(), a.high_codes());
        assert_eq!(out.low_codes(), b.low_codes());
        assert_eq!(out.constant_input(), b.constant_input());
        let back = lcr_compose(&b, &out).unwrap();
        assert_eq!(back.high_codes(), b.high_codes());
    }

    #[test]
    fn lcr_resolution_mismatch() {
        let a = hier(0.0);
        let b = HierLatent::zeros(64, 3).unwrap();
        assert!(matches!(lcr_compose(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn id_injection_starts_as_identity() {
        let p = IdInjectionParams::init(2, 4, 6, 9);
        let t = Tensor::new([2, 4], vec![1.0, 2.0, -3.0, 0.5, 0.0, 1.0, 1.0, -1.0]);
        let out = id_inject(&t, &code(&[0.3, -0.2, 1.0, 0.0]), &p).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn id_injection_zero_code_zero_bias_is_identity() {
        let mut p = IdInjectionParams::init(1, 3, 3, 2);
        // Non-zero modulation weights, zero biases everywhere.
        for name in ["block0.gamma.weight", "block0.beta.weight"] {
            *p.params_mut().get_mut(name).unwrap() = Tensor::full([3, 3], 0.7);
        }
        let t = Tensor::new([1, 3], vec![1.0, -2.0, 0.5]);
        assert_eq!(id_inject(&t, &LatentCode::zeros(3), &p).unwrap(), t);
    }

    #[test]
    fn identity_code_is_row_mean() {
        let t = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 6.0]);
        assert_eq!(identity_code(&t).unwrap().values(), &[2.0, 4.0]);
    }
}
