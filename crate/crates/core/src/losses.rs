//! Training objectives: InfoNCE, the soft contrastive loss, the diffusion
//! noise-prediction loss, and the exact difference between the hard-target
//! and soft-target cross-entropy forms.
//!
//! Each loss has a plain scalar form (used for reporting and as a reference)
//! and a graph form recorded on a [`Graph`] for training.

use crate::error::{Error, Result};
use crate::kernels::{check_beta, soft_weight_factor, KernelConfig, PairIndicator, EPS_P};
use crate::numerics::{Graph, Tensor, Unary, Var};

/// Similarities, soft weights and indicators for one center against its
/// background set. All three matrices share shape `n × n`; only the row of
/// `center` enters the losses.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatchView {
    pub q: Tensor,
    pub p: Tensor,
    pub h: PairIndicator,
    pub center: usize,
}

impl ContrastiveBatchView {
    pub fn new(q: Tensor, p: Tensor, h: PairIndicator, center: usize) -> Result<Self> {
        let n = h.len();
        for (name, m) in [("q", &q), ("p", &p)] {
            if m.rows() != n || m.cols() != n || m.shape().len() != 2 {
                return Err(Error::Dimension(format!(
                    "{name} has shape {:?}, indicator is {n}×{n}",
                    m.shape()
                )));
            }
        }
        if center >= n {
            return Err(Error::Dimension(format!("center {center} outside batch of {n}")));
        }
        if let Some(v) = p.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("soft weight {v} outside [0, 1]")));
        }
        if let Some(v) = q.data().iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(Error::Domain(format!("similarity {v} outside (0, 1]")));
        }
        Ok(Self { q, p, h, center })
    }

    /// Q from the z embeddings, P from the y embeddings with the soft-weight
    /// multiplier applied where `h` is set.
    pub fn from_embeddings(
        y: &Tensor,
        z: &Tensor,
        h: PairIndicator,
        center: usize,
        scl: &SclConfig,
    ) -> Result<Self> {
        check_beta(scl.beta)?;
        let q = crate::kernels::pairwise_q(z, &scl.kernel_z)?;
        let ky = crate::kernels::pairwise_q(y, &scl.kernel_y)?;
        let n = h.len();
        let mut p = ky.clone();
        for i in 0..n {
            for j in 0..n {
                let v = soft_weight_factor(h.get(i, j), scl.beta) * ky.get2(i, j);
                p.data_mut()[i * n + j] = v.clamp(0.0, 1.0 - EPS_P);
            }
        }
        Self::new(q, p, h, center)
    }

    fn companions(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.h.len()).filter(move |&j| j != self.center)
    }

    fn qc(&self, j: usize) -> f64 {
        self.q.get2(self.center, j).clamp(EPS_P, 1.0 - EPS_P)
    }
}

/// Kernels and softening strength for the soft contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SclConfig {
    pub kernel_y: KernelConfig,
    pub kernel_z: KernelConfig,
    pub beta: f64,
}

fn bce(target: f64, q: f64) -> f64 {
    -(target * q.ln() + (1.0 - target) * (1.0 - q).ln())
}

/// `−log q_pos + log(q_pos + Σ q_neg)`.
pub fn infonce_loss(q_pos: f64, q_negs: &[f64]) -> Result<f64> {
    if !(q_pos > 0.0 && q_pos <= 1.0) {
        return Err(Error::Domain(format!("positive similarity {q_pos} outside (0, 1]")));
    }
    if let Some(v) = q_negs.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
        return Err(Error::Domain(format!("negative similarity {v} outside (0, 1]")));
    }
    let total = q_pos + q_negs.iter().sum::<f64>();
    Ok(-q_pos.ln() + total.ln())
}

/// Soft contrastive loss: cross-entropy of `Q` against soft targets `P` over
/// the center's companions.
pub fn scl_loss(view: &ContrastiveBatchView) -> f64 {
    view.companions()
        .map(|j| bce(view.p.get2(view.center, j), view.qc(j)))
        .sum()
}

/// The same cross-entropy with hard targets `H`.
pub fn cl_bce_loss(view: &ContrastiveBatchView) -> f64 {
    view.companions()
        .map(|j| {
            let h = if view.h.get(view.center, j) { 1.0 } else { 0.0 };
            bce(h, view.qc(j))
        })
        .sum()
}

/// `Σ_j (H_cj − P_cj) · log(1/Q_cj − 1)`, which equals
/// `cl_bce_loss − scl_loss` exactly.
pub fn scl_cl_difference_closed_form(view: &ContrastiveBatchView) -> f64 {
    view.companions()
        .map(|j| {
            let h = if view.h.get(view.center, j) { 1.0 } else { 0.0 };
            let q = view.qc(j);
            (h - view.p.get2(view.center, j)) * (1.0 / q - 1.0).ln()
        })
        .sum()
}

/// Mean over rows of `‖delta − pred‖²`.
pub fn diffusion_loss(pred: &Tensor, delta: &Tensor) -> Result<f64> {
    if pred.shape() != delta.shape() {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs noise {:?}",
            pred.shape(),
            delta.shape()
        )));
    }
    let sq: f64 = pred
        .data()
        .iter()
        .zip(delta.data())
        .map(|(a, b)| (b - a) * (b - a))
        .sum();
    Ok(sq / pred.rows() as f64)
}

/// Center/companion pairs over a stacked embedding matrix. Each entry of
/// `pairs` is `(center_row, companion_row)`; `group[m]` numbers the center
/// the pair belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairSet {
    pub pairs: Vec<(usize, usize)>,
    pub positive: Vec<bool>,
    pub group: Vec<usize>,
    pub groups: usize,
}

impl PairSet {
    pub fn push_group(&mut self, center: usize, companions: &[(usize, bool)]) {
        for &(j, pos) in companions {
            self.pairs.push((center, j));
            self.positive.push(pos);
            self.group.push(self.groups);
        }
        self.groups += 1;
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Soft contrastive loss on the graph, averaged over centers.
///
/// `y` and `z` are stacked embeddings (one row per sample); P is built from
/// `y` and Q from `z`.
pub fn scl_loss_graph(
    g: &mut Graph,
    y: Var,
    z: Var,
    set: &PairSet,
    scl: &SclConfig,
) -> Result<Var> {
    check_beta(scl.beta)?;
    if set.is_empty() {
        return Err(Error::Dimension("no pairs".into()));
    }
    let dz = g.row_sq_dist(z, &set.pairs)?;
    let q = g.unary(dz, Unary::TKernelSq { nu: scl.kernel_z.nu() })?;
    let q = g.clamp(q, EPS_P, 1.0 - EPS_P)?;

    let dy = g.row_sq_dist(y, &set.pairs)?;
    let ky = g.unary(dy, Unary::TKernelSq { nu: scl.kernel_y.nu() })?;
    let r: Vec<f64> = set
        .positive
        .iter()
        .map(|&h| soft_weight_factor(h, scl.beta))
        .collect();
    let r = g.input(Tensor::matrix(set.len(), 1, r)?);
    let p = g.mul(ky, r)?;
    let p = g.clamp(p, 0.0, 1.0 - EPS_P)?;

    let log_q = g.log(q)?;
    let one_minus_q = g.unary(q, Unary::Scale(-1.0))?;
    let one_minus_q = g.add_scalar(one_minus_q, 1.0)?;
    let log_1mq = g.log(one_minus_q)?;
    let one_minus_p = g.scale(p, -1.0)?;
    let one_minus_p = g.add_scalar(one_minus_p, 1.0)?;
    let a = g.mul(p, log_q)?;
    let b = g.mul(one_minus_p, log_1mq)?;
    let t = g.add(a, b)?;
    let s = g.sum(t)?;
    g.scale(s, -1.0 / set.groups as f64)
}

/// InfoNCE on the graph: for each center, the mean over its positives of
/// `−log q_pos + log(q_pos + Σ q_neg)`, averaged over centers.
pub fn infonce_loss_graph(g: &mut Graph, z: Var, set: &PairSet, kernel: &KernelConfig) -> Result<Var> {
    if set.is_empty() {
        return Err(Error::Dimension("no pairs".into()));
    }
    let dz = g.row_sq_dist(z, &set.pairs)?;
    let q = g.unary(dz, Unary::TKernelSq { nu: kernel.nu() })?;
    let q = g.clamp(q, f64::MIN_POSITIVE, 1.0)?;

    let mut per_center = Vec::with_capacity(set.groups);
    for c in 0..set.groups {
        let members = (0..set.len()).filter(|&m| set.group[m] == c);
        let (pos, neg): (Vec<usize>, Vec<usize>) = members.partition(|&m| set.positive[m]);
        if pos.is_empty() {
            return Err(Error::Domain(format!("center {c} has no positive")));
        }
        let qp = g.select_rows(q, &pos)?;
        let denom = if neg.is_empty() {
            qp
        } else {
            let qn = g.select_rows(q, &neg)?;
            let sn = g.sum(qn)?;
            g.add_row(qp, sn)?
        };
        let lp = g.log(qp)?;
        let ld = g.log(denom)?;
        let terms = g.sub(ld, lp)?;
        per_center.push(g.mean(terms)?);
    }
    let mut total = per_center[0];
    for &v in &per_center[1..] {
        total = g.add(total, v)?;
    }
    g.scale(total, 1.0 / set.groups as f64)
}

/// Mean over rows of `‖delta − pred‖²` on the graph.
pub fn diffusion_loss_graph(g: &mut Graph, pred: Var, delta: Var) -> Result<Var> {
    let rows = g.value(pred).rows();
    let diff = g.sub(delta, pred)?;
    let sq = g.square(diff)?;
    let s = g.sum(sq)?;
    g.scale(s, 1.0 / rows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Space;

    fn view_1pair(p: f64, q: f64, h: bool) -> ContrastiveBatchView {
        let mut ind = PairIndicator::new(2);
        ind.set(0, 1, h);
        let q = Tensor::matrix(2, 2, vec![1.0, q, q, 1.0]).unwrap();
        let p = Tensor::matrix(2, 2, vec![1.0 - EPS_P, p, p, 1.0 - EPS_P]).unwrap();
        ContrastiveBatchView::new(q, p, ind, 0).unwrap()
    }

    #[test]
    fn infonce_examples() {
        let q = 0.37;
        let l = infonce_loss(q, &[q; 4]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-14);
        assert_eq!(infonce_loss(1.0, &[]).unwrap(), 0.0);
        let l = infonce_loss(0.8, &[0.1, 0.2]).unwrap();
        assert!((l - (-(0.8f64).ln() + 1.1f64.ln())).abs() < 1e-15);
        assert!((l - 0.31845).abs() < 1e-5);
        assert!(matches!(infonce_loss(0.0, &[0.5]), Err(Error::Domain(_))));
    }

    #[test]
    fn scl_single_pair_examples() {
        assert!(scl_loss(&view_1pair(1.0, 1.0 - EPS_P, true)) < 1e-6);
        // P = Q = 1 − ε leaves the binary entropy of ε
        let h = -(EPS_P * EPS_P.ln() + (1.0 - EPS_P) * (1.0 - EPS_P).ln());
        assert!((scl_loss(&view_1pair(1.0 - EPS_P, 1.0 - EPS_P, true)) - h).abs() < 1e-15);
        assert!((scl_loss(&view_1pair(0.5, 0.5, true)) - 2f64.ln()).abs() < 1e-12);
        assert!(scl_loss(&view_1pair(0.0, EPS_P, false)) < 1e-6);
    }

    #[test]
    fn difference_vanishes_at_half() {
        let v = view_1pair(0.2, 0.5, true);
        assert!(scl_cl_difference_closed_form(&v).abs() < 1e-15);
    }

    #[test]
    fn difference_vanishes_when_targets_agree() {
        // P equals H on the only companion pair: P = 0 for a negative.
        let v = view_1pair(0.0, 0.3, false);
        assert_eq!(scl_cl_difference_closed_form(&v), 0.0);
    }

    #[test]
    fn view_validates_inputs() {
        let ind = PairIndicator::new(2);
        let q = Tensor::matrix(2, 2, vec![1.0, 0.5, 0.5, 1.0]).unwrap();
        let bad_p = Tensor::matrix(2, 2, vec![1.0, 1.5, 1.5, 1.0]).unwrap();
        assert!(ContrastiveBatchView::new(q.clone(), bad_p, ind.clone(), 0).is_err());
        let p = Tensor::matrix(2, 2, vec![0.5; 4]).unwrap();
        assert!(ContrastiveBatchView::new(q, p, ind, 2).is_err());
    }

    #[test]
    fn diffusion_examples() {
        let d = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(diffusion_loss(&d, &d).unwrap(), 0.0);
        let zero = Tensor::zeros(&[1, 2]);
        assert_eq!(diffusion_loss(&zero, &d).unwrap(), 5.0);
        let unit = Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(diffusion_loss(&unit, &Tensor::zeros(&[1, 3])).unwrap(), 1.0);
        assert!(matches!(
            diffusion_loss(&unit, &zero),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn graph_forms_match_scalar_forms() {
        let scl = SclConfig {
            kernel_y: KernelConfig::new(2.0, Space::Y).unwrap(),
            kernel_z: KernelConfig::new(1.0, Space::Z).unwrap(),
            beta: 0.4,
        };
        let y = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        let z = Tensor::matrix(4, 2, (0..8).map(|i| (i as f64 * 1.3).sin()).collect()).unwrap();
        let mut h = PairIndicator::new(4);
        h.set(0, 1, true);
        let view = ContrastiveBatchView::from_embeddings(&y, &z, h, 0, &scl).unwrap();

        let mut set = PairSet::default();
        set.push_group(0, &[(1, true), (2, false), (3, false)]);
        let mut g = Graph::new();
        let (yv, zv) = (g.input(y), g.input(z.clone()));
        let l = scl_loss_graph(&mut g, yv, zv, &set, &scl).unwrap();
        assert!((g.scalar(l) - scl_loss(&view)).abs() < 1e-12);

        let lnce = infonce_loss_graph(&mut g, zv, &set, &scl.kernel_z).unwrap();
        let want = infonce_loss(view.q.get2(0, 1), &[view.q.get2(0, 2), view.q.get2(0, 3)]).unwrap();
        assert!((g.scalar(lnce) - want).abs() < 1e-12);
    }
}
