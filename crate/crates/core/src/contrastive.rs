//! Contrastive machinery: memory banks, InfoNCE, momentum updates, semantic
//! positive mining, and the combined pre-training objective.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::augment::Views;
use crate::autograd::{sigmoid, softplus, Bound, Graph, Params, Tensor, Var};
use crate::encoders::{pose_batch, rgb_batch, PoseEncoder, ProjectionHead, RgbEncoder};
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

/// Rounds to the nearest f32 so state survives a 32-bit checkpoint exactly.
pub fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

// -------------------------------------------------------------- banks ----

/// Fixed-capacity FIFO queue of unit-norm rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    rows: Array2<f64>,
    cursor: usize,
}

fn unit_rows(rows: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut out = rows.to_owned();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if !(norm > 1e-12) || !norm.is_finite() {
            return Err(Error::ZeroNorm);
        }
        row.mapv_inplace(|v| round_f32(v / norm));
    }
    Ok(out)
}

impl MemoryBank {
    /// `capacity` random unit vectors of dimension `dim`.
    pub fn random(capacity: usize, dim: usize, r: &mut Rng) -> Result<Self> {
        use rand_distr::{Distribution, StandardNormal};
        if capacity == 0 || dim == 0 {
            return invalid("memory bank capacity and dimension must be positive");
        }
        let raw = Array2::from_shape_fn((capacity, dim), |_| StandardNormal.sample(r));
        Ok(Self {
            rows: unit_rows(raw.view())?,
            cursor: 0,
        })
    }

    /// A bank with the given contents; rows are normalized.
    pub fn from_rows(rows: ArrayView2<'_, f64>, cursor: usize) -> Result<Self> {
        if rows.nrows() == 0 || cursor >= rows.nrows() {
            return invalid("memory bank needs at least one row and a cursor inside it");
        }
        Ok(Self {
            rows: unit_rows(rows)?,
            cursor,
        })
    }

    /// Restores saved contents verbatim; rows must already be unit norm.
    pub fn restore(rows: Array2<f64>, cursor: usize) -> Result<Self> {
        if rows.nrows() == 0 || cursor >= rows.nrows() {
            return invalid("memory bank needs at least one row and a cursor inside it");
        }
        for r in rows.rows() {
            if (r.dot(&r).sqrt() - 1.0).abs() > 1e-5 {
                return invalid("restored memory bank row is not unit norm");
            }
        }
        Ok(Self { rows, cursor })
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn capacity(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Rejects batch sizes that would not tile the queue exactly.
    pub fn check_batch(&self, batch: usize) -> Result<()> {
        if batch == 0 || self.capacity() % batch != 0 {
            return invalid(format!(
                "batch size {batch} must divide the memory bank capacity {}",
                self.capacity()
            ));
        }
        Ok(())
    }

    /// Normalizes `new_rows`, writes them at the cursor and advances it.
    pub fn enqueue(&mut self, new_rows: ArrayView2<'_, f64>) -> Result<()> {
        if new_rows.ncols() != self.dim() {
            return Err(Error::Dimension(format!(
                "enqueue of {}-dim rows into a {}-dim bank",
                new_rows.ncols(),
                self.dim()
            )));
        }
        self.check_batch(new_rows.nrows())?;
        let normed = unit_rows(new_rows)?;
        let n = self.capacity();
        for (i, row) in normed.rows().into_iter().enumerate() {
            self.rows.row_mut((self.cursor + i) % n).assign(&row);
        }
        self.cursor = (self.cursor + normed.nrows()) % n;
        Ok(())
    }
}

// ------------------------------------------------------------- config ----

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub tau_spm: f64,
    /// Positives mined per modality.
    pub k: usize,
    /// Momentum of the key encoders.
    pub gamma: f64,
    /// Steps before mined pseudo-labels switch on; `None` means one full
    /// queue turnover.
    pub spm_warmup_steps: Option<usize>,
    pub use_spm: bool,
    pub use_cross: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            tau_spm: 0.02,
            k: 10,
            gamma: 0.999,
            spm_warmup_steps: None,
            use_spm: true,
            use_cross: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, bank_size: usize) -> Result<()> {
        if !(self.tau > 0.0) || !(self.tau_spm > 0.0) {
            return invalid("temperatures must be positive");
        }
        if self.k == 0 || self.k >= bank_size {
            return invalid(format!("k = {} must satisfy 1 <= k < N = {bank_size}", self.k));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return invalid("gamma must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn warmup_steps(&self, bank_size: usize, batch: usize) -> usize {
        self.spm_warmup_steps.unwrap_or(bank_size / batch.max(1))
    }
}

// ------------------------------------------------------- scalar maths ----

/// `-log(exp(q.k/tau) / (exp(q.k/tau) + sum_i exp(q.s_i/tau)))`.
pub fn info_nce(z_q: ArrayView1<'_, f64>, z_k: ArrayView1<'_, f64>, negatives: ArrayView2<'_, f64>, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return invalid("InfoNCE temperature must be positive");
    }
    let pos = z_q.dot(&z_k) / tau;
    let logits: Vec<f64> = std::iter::once(pos)
        .chain(negatives.rows().into_iter().map(|s| z_q.dot(&s) / tau))
        .collect();
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    Ok((lse - pos).max(0.0))
}

/// `theta_k <- gamma * theta_k + (1 - gamma) * theta_q`, elementwise.
pub fn ema_update(theta_q: &Params, theta_k: &mut Params, gamma: f64) -> Result<()> {
    check_parity(theta_q, theta_k)?;
    for (k, q) in theta_k.values_mut().iter_mut().zip(theta_q.values()) {
        k.zip_mut_with(q, |kv, &qv| *kv = gamma * *kv + (1.0 - gamma) * qv);
    }
    Ok(())
}

/// Query and key twins must have identical names and shapes.
pub fn check_parity(a: &Params, b: &Params) -> Result<()> {
    if a.shapes() != b.shapes() {
        return Err(Error::Dimension("query and key parameters differ in shape".into()));
    }
    Ok(())
}

/// Indicator of the `k` rows of `bank` with the largest dot product with
/// the normalized `g`; ties go to the lower index.
pub fn top_k_indicator(g: ArrayView1<'_, f64>, bank: ArrayView2<'_, f64>, k: usize) -> Result<Vec<bool>> {
    let n = bank.nrows();
    if k == 0 || k >= n {
        return invalid(format!("k = {k} must satisfy 1 <= k < N = {n}"));
    }
    let norm = g.dot(&g).sqrt();
    if !(norm > 0.0) {
        return Err(Error::ZeroNorm);
    }
    let scores: Vec<f64> = bank.rows().into_iter().map(|r| r.dot(&g) / norm).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut y = vec![false; n];
    for &i in &order[..k] {
        y[i] = true;
    }
    Ok(y)
}

/// Union of the per-modality top-k neighbour indicators.
pub fn spm_pseudo_labels(
    g_rgb: ArrayView1<'_, f64>,
    g_pose: ArrayView1<'_, f64>,
    bank_rgb: ArrayView2<'_, f64>,
    bank_pose: ArrayView2<'_, f64>,
    k: usize,
) -> Result<Vec<bool>> {
    if bank_rgb.nrows() != bank_pose.nrows() {
        return invalid("both g-banks must have the same capacity");
    }
    let yr = top_k_indicator(g_rgb, bank_rgb, k)?;
    let yp = top_k_indicator(g_pose, bank_pose, k)?;
    Ok(yr.iter().zip(&yp).map(|(a, b)| *a || *b).collect())
}

/// Pre-logistic scores `f . rows / tau_spm`.
pub fn spm_scores(f: ArrayView1<'_, f64>, bank: ArrayView2<'_, f64>, tau_spm: f64) -> Vec<f64> {
    bank.rows().into_iter().map(|r| f.dot(&r) / tau_spm).collect()
}

/// Per-entry probabilities that each bank row is a positive.
pub fn spm_logits(f: ArrayView1<'_, f64>, bank: ArrayView2<'_, f64>, tau_spm: f64) -> Vec<f64> {
    spm_scores(f, bank, tau_spm).into_iter().map(sigmoid).collect()
}

/// Mean binary cross-entropy, evaluated from pre-logistic scores.
pub fn spm_bce(scores: &[f64], y: &[bool]) -> Result<f64> {
    if scores.len() != y.len() || scores.is_empty() {
        return invalid("scores and labels must be non-empty and of equal length");
    }
    let sum: f64 = scores
        .iter()
        .zip(y)
        .map(|(&x, &t)| softplus(x) - if t { x } else { 0.0 })
        .sum();
    Ok(sum / scores.len() as f64)
}

// ----------------------------------------------------------- branches ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Rgb,
    Pose,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Rgb, Modality::Pose];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Pose => "pose",
        }
    }
}

/// The architecture shared by pre-training, fine-tuning and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Networks {
    pub rgb: RgbEncoder,
    pub pose: PoseEncoder,
    pub rgb_head: ProjectionHead,
    pub pose_head: ProjectionHead,
}

impl Networks {
    pub fn new(rgb: RgbEncoder, pose: PoseEncoder, proj_hidden: usize, proj_dim: usize) -> Self {
        let rgb_head = ProjectionHead {
            in_dim: rgb.out_dim(),
            hidden: proj_hidden,
            out_dim: proj_dim,
        };
        let pose_head = ProjectionHead {
            in_dim: pose.out_dim(),
            hidden: proj_hidden,
            out_dim: proj_dim,
        };
        Self {
            rgb,
            pose,
            rgb_head,
            pose_head,
        }
    }

    pub fn embed_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Rgb => self.rgb.out_dim(),
            Modality::Pose => self.pose.out_dim(),
        }
    }

    pub fn head(&self, m: Modality) -> &ProjectionHead {
        match m {
            Modality::Rgb => &self.rgb_head,
            Modality::Pose => &self.pose_head,
        }
    }

    pub fn init_encoder(&self, m: Modality, r: &mut Rng) -> Params {
        match m {
            Modality::Rgb => self.rgb.init(r),
            Modality::Pose => self.pose.init(r),
        }
    }

    /// Encoder output g for a batch tensor of the given modality.
    pub fn encode(&self, m: Modality, g: &mut Graph, p: &Bound, x: &Tensor) -> Result<Var> {
        match m {
            Modality::Rgb => {
                let xv = g.constant(x.clone());
                self.rgb.forward(g, p, xv)
            }
            Modality::Pose => self.pose.forward(g, p, x),
        }
    }

    pub fn descriptor(&self) -> Vec<(String, String)> {
        let mut d = self.rgb.descriptor();
        d.extend(self.pose.descriptor());
        d.extend(self.rgb_head.descriptor("rgb_head"));
        d.extend(self.pose_head.descriptor("pose_head"));
        d
    }
}

/// One modality's query/key encoders, projection heads and bank pair.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchState {
    pub encoder_q: Params,
    pub encoder_k: Params,
    pub head_q: Params,
    pub head_k: Params,
    pub g_bank: MemoryBank,
    pub f_bank: MemoryBank,
}

impl BranchState {
    /// Key twins start as copies of the query networks.
    pub fn new(encoder: Params, head: Params, g_bank: MemoryBank, f_bank: MemoryBank) -> Result<Self> {
        if g_bank.capacity() != f_bank.capacity() {
            return invalid("g-bank and f-bank must share a capacity");
        }
        Ok(Self {
            encoder_k: encoder.clone(),
            encoder_q: encoder,
            head_k: head.clone(),
            head_q: head,
            g_bank,
            f_bank,
        })
    }

    /// Fresh state with seeded weights and random unit banks.
    pub fn init(nets: &Networks, m: Modality, bank_size: usize, init_rng: &mut Rng, bank_rng: &mut Rng) -> Result<Self> {
        let encoder = nets.init_encoder(m, init_rng);
        let head = nets.head(m).init(init_rng);
        let encoder = encoder_rounded(encoder);
        let head = encoder_rounded(head);
        let g_bank = MemoryBank::random(bank_size, nets.embed_dim(m), bank_rng)?;
        let f_bank = MemoryBank::random(bank_size, nets.head(m).out_dim, bank_rng)?;
        Self::new(encoder, head, g_bank, f_bank)
    }

    pub fn check(&self) -> Result<()> {
        check_parity(&self.encoder_q, &self.encoder_k)?;
        check_parity(&self.head_q, &self.head_k)
    }
}

fn encoder_rounded(mut p: Params) -> Params {
    for v in p.values_mut() {
        v.mapv_inplace(round_f32);
    }
    p
}

// ---------------------------------------------------------- objective ----

/// Query and key inputs for a batch, as encoder-ready tensors.
#[derive(Clone, Debug)]
pub struct BatchViews {
    pub rgb_q: Tensor,
    pub rgb_k: Tensor,
    pub pose_q: Tensor,
    pub pose_k: Tensor,
}

impl BatchViews {
    pub fn from_views(views: &[Views]) -> Self {
        let rq: Vec<_> = views.iter().map(|v| &v.query.rgb).collect();
        let rk: Vec<_> = views.iter().map(|v| &v.key.rgb).collect();
        let pq: Vec<_> = views.iter().map(|v| &v.query.pose).collect();
        let pk: Vec<_> = views.iter().map(|v| &v.key.pose).collect();
        Self {
            rgb_q: rgb_batch(&rq),
            rgb_k: rgb_batch(&rk),
            pose_q: pose_batch(&pq),
            pose_k: pose_batch(&pk),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.rgb_q.shape()[0]
    }

    fn get(&self, m: Modality) -> (&Tensor, &Tensor) {
        match m {
            Modality::Rgb => (&self.rgb_q, &self.rgb_k),
            Modality::Pose => (&self.pose_q, &self.pose_k),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_cl_r: f64,
    pub l_cl_p: f64,
    pub l_spm_r: f64,
    pub l_spm_p: f64,
    pub l_r2p: f64,
    pub l_p2r: f64,
    pub l_single: f64,
    pub l_cross: f64,
    pub total: f64,
}

/// Gradients for one branch; key entries come from the same backward
/// sweep as the query entries.
#[derive(Clone, Debug)]
pub struct BranchGrads {
    pub encoder_q: Params,
    pub head_q: Params,
    pub encoder_k: Params,
    pub head_k: Params,
}

/// Key embeddings `g_k` (pre-projection) and `f_k` for enqueueing.
#[derive(Clone, Debug)]
pub struct KeyEmbeddings {
    pub g: Array2<f64>,
    pub f: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub report: LossReport,
    /// `[rgb, pose]`, present when gradients were requested.
    pub grads: Option<[BranchGrads; 2]>,
    pub keys: [KeyEmbeddings; 2],
}

fn to2(t: &Tensor) -> Array2<f64> {
    t.view().into_dimensionality().expect("rank-2 tensor").to_owned()
}

/// Pseudo-label matrix `[B, N]` for the batch.
pub fn batch_pseudo_labels(g_rgb: &Array2<f64>, g_pose: &Array2<f64>, bank_rgb: &MemoryBank, bank_pose: &MemoryBank, k: usize) -> Result<Array2<f64>> {
    let n = bank_rgb.capacity();
    let mut y = Array2::zeros((g_rgb.nrows(), n));
    for (i, mut row) in y.axis_iter_mut(Axis(0)).enumerate() {
        let labels = spm_pseudo_labels(g_rgb.row(i), g_pose.row(i), bank_rgb.rows().view(), bank_pose.rows().view(), k)?;
        for (slot, on) in row.iter_mut().zip(labels) {
            *slot = if on { 1.0 } else { 0.0 };
        }
    }
    Ok(y)
}

/// Evaluates the full pre-training objective for one batch. `step` decides
/// whether mined pseudo-labels are active yet. Banks are read, not updated.
pub fn pretrain_losses(
    nets: &Networks,
    batch: &BatchViews,
    rgb: &BranchState,
    pose: &BranchState,
    cfg: &LossConfig,
    step: usize,
    want_grads: bool,
) -> Result<StepOutput> {
    let n = rgb.f_bank.capacity();
    if pose.f_bank.capacity() != n || rgb.g_bank.capacity() != n || pose.g_bank.capacity() != n {
        return invalid("all memory banks must share one capacity");
    }
    cfg.validate(n)?;
    let bsz = batch.batch_size();
    let mut g = if want_grads { Graph::new() } else { Graph::no_grad() };

    struct Pass {
        bound: [Bound; 4],
        g_q: Var,
        f_q: Var,
        f_k: Var,
        keys: KeyEmbeddings,
    }
    let mut passes = Vec::with_capacity(2);
    for (m, st) in Modality::BOTH.into_iter().zip([rgb, pose]) {
        st.check()?;
        let head = nets.head(m);
        let (xq, xk) = batch.get(m);
        let enc_q = st.encoder_q.bind(&mut g, true);
        let head_q = st.head_q.bind(&mut g, true);
        let enc_k = st.encoder_k.bind(&mut g, true);
        let head_k = st.head_k.bind(&mut g, true);
        let g_q = nets.encode(m, &mut g, &enc_q, xq)?;
        let f_q = head.forward(&mut g, &head_q, g_q);
        let g_k = nets.encode(m, &mut g, &enc_k, xk)?;
        let f_k_live = head.forward(&mut g, &head_k, g_k);
        // The key pathway ends here: everything downstream sees constants.
        let f_k = g.detach(f_k_live);
        let keys = KeyEmbeddings {
            g: to2(g.value(g_k)),
            f: to2(g.value(f_k)),
        };
        passes.push(Pass {
            bound: [enc_q, head_q, enc_k, head_k],
            g_q,
            f_q,
            f_k,
            keys,
        });
    }
    let (pr, pp) = (&passes[0], &passes[1]);

    let l_cl_r = g.info_nce(pr.f_q, pr.f_k, rgb.f_bank.rows(), cfg.tau);
    let l_cl_p = g.info_nce(pp.f_q, pp.f_k, pose.f_bank.rows(), cfg.tau);
    let mut terms = vec![l_cl_r, l_cl_p];
    let mut report = LossReport {
        l_cl_r: g.scalar_value(l_cl_r),
        l_cl_p: g.scalar_value(l_cl_p),
        ..LossReport::default()
    };
    if cfg.use_spm {
        let y = if step >= cfg.warmup_steps(n, bsz) {
            let gq_r = to2(g.value(pr.g_q));
            let gq_p = to2(g.value(pp.g_q));
            batch_pseudo_labels(&gq_r, &gq_p, &rgb.g_bank, &pose.g_bank, cfg.k)?
        } else {
            Array2::zeros((bsz, n))
        };
        let l_spm_r = g.bank_bce(pr.f_q, rgb.f_bank.rows(), &y, cfg.tau_spm);
        let l_spm_p = g.bank_bce(pp.f_q, pose.f_bank.rows(), &y, cfg.tau_spm);
        report.l_spm_r = g.scalar_value(l_spm_r);
        report.l_spm_p = g.scalar_value(l_spm_p);
        terms.extend([l_spm_r, l_spm_p]);
    }
    if cfg.use_cross {
        let l_r2p = g.info_nce(pp.f_q, pr.f_k, rgb.f_bank.rows(), cfg.tau);
        let l_p2r = g.info_nce(pr.f_q, pp.f_k, pose.f_bank.rows(), cfg.tau);
        report.l_r2p = g.scalar_value(l_r2p);
        report.l_p2r = g.scalar_value(l_p2r);
        terms.extend([l_r2p, l_p2r]);
    }
    report.l_single = report.l_cl_r + report.l_spm_r + report.l_cl_p + report.l_spm_p;
    report.l_cross = report.l_r2p + report.l_p2r;
    let total = g.sum_vars(&terms);
    report.total = g.scalar_value(total);

    let grads = if want_grads {
        let sweep = g.backward(total);
        let mut out = Vec::with_capacity(2);
        for (pass, st) in passes.iter().zip([rgb, pose]) {
            let [eq, hq, ek, hk] = &pass.bound;
            out.push(BranchGrads {
                encoder_q: eq.grads(&st.encoder_q, &sweep),
                head_q: hq.grads(&st.head_q, &sweep),
                encoder_k: ek.grads(&st.encoder_k, &sweep),
                head_k: hk.grads(&st.head_k, &sweep),
            });
        }
        let pose_g = out.pop().expect("two branches");
        let rgb_g = out.pop().expect("two branches");
        Some([rgb_g, pose_g])
    } else {
        None
    };
    let mut keys = passes.into_iter().map(|p| p.keys);
    let keys = [keys.next().expect("rgb keys"), keys.next().expect("pose keys")];
    Ok(StepOutput { report, grads, keys })
}

/// Pushes a step's keys into both banks of a branch, sharing one cursor.
pub fn enqueue_keys(state: &mut BranchState, keys: &KeyEmbeddings) -> Result<()> {
    state.g_bank.enqueue(keys.g.view())?;
    state.f_bank.enqueue(keys.f.view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::{array, Array1};

    #[test]
    fn info_nce_examples() {
        let e1 = array![1.0, 0.0];
        let e2 = array![[0.0, 1.0]];
        let empty = Array2::<f64>::zeros((0, 2));
        assert_eq!(info_nce(e1.view(), e1.view(), empty.view(), 1.0).unwrap(), 0.0);
        let l = info_nce(e1.view(), e1.view(), e2.view(), 1.0).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.31326).abs() < 1e-5);
        let l = info_nce(e1.view(), e1.view(), e2.view(), 0.07).unwrap();
        assert!((l - 6.2e-7).abs() < 0.05e-7, "{l}");
        assert!(info_nce(e1.view(), e1.view(), e2.view(), 0.0).is_err());
    }

    #[test]
    fn ema_examples() {
        let mk = |v: f64| {
            let mut p = Params::new();
            p.push("w", Tensor::from_elem(ndarray::IxDyn(&[2]), v));
            p
        };
        let mut k = mk(0.5);
        ema_update(&mk(1.0), &mut k, 0.9).unwrap();
        assert!((k.values()[0][[0]] - 0.55).abs() < 1e-15);
        let mut k = mk(0.5);
        ema_update(&mk(1.0), &mut k, 1.0).unwrap();
        assert_eq!(k, mk(0.5));
        ema_update(&mk(1.0), &mut k, 0.0).unwrap();
        assert_eq!(k, mk(1.0));
        let mut other = Params::new();
        other.push("w", Tensor::zeros(ndarray::IxDyn(&[3])));
        assert!(ema_update(&mk(1.0), &mut other, 0.5).is_err());
    }

    #[test]
    fn bank_fifo_and_errors() {
        let eye = Array2::<f64>::eye(4);
        let mut bank = MemoryBank::from_rows(eye.view(), 0).unwrap();
        let batch = |a: f64| array![[a, 1.0, 0.0, 0.0], [a, 0.0, 1.0, 0.0]];
        bank.enqueue(batch(1.0).view()).unwrap();
        bank.enqueue(batch(2.0).view()).unwrap();
        bank.enqueue(batch(3.0).view()).unwrap();
        // rows 0-1 now hold C, rows 2-3 hold B
        let expect = unit_rows(ndarray::concatenate![Axis(0), batch(3.0), batch(2.0)].view()).unwrap();
        assert_eq!(bank.rows(), &expect);
        assert_eq!(bank.cursor(), 2);
        assert!(matches!(bank.enqueue(Array2::zeros((2, 4)).view()), Err(Error::ZeroNorm)));
        assert!(bank.enqueue(Array2::ones((3, 4)).view()).is_err());
        assert!(bank.enqueue(Array2::ones((2, 3)).view()).is_err());
    }

    #[test]
    fn pseudo_label_examples() {
        let eye = Array2::<f64>::eye(4);
        let (e1, e3): (Array1<f64>, Array1<f64>) = (eye.row(0).to_owned(), eye.row(2).to_owned());
        let y = spm_pseudo_labels(e1.view(), e3.view(), eye.view(), eye.view(), 1).unwrap();
        assert_eq!(y, vec![true, false, true, false]);
        let y = spm_pseudo_labels(e1.view(), e1.view(), eye.view(), eye.view(), 1).unwrap();
        assert_eq!(y.iter().filter(|&&b| b).count(), 1);
        assert!(spm_pseudo_labels(e1.view(), e1.view(), eye.view(), eye.view(), 4).is_err());
        // ties resolve to the lowest index
        let flat = Array2::<f64>::from_elem((4, 2), 1.0);
        let y = top_k_indicator(array![1.0, 1.0].view(), flat.view(), 2).unwrap();
        assert_eq!(y, vec![true, true, false, false]);
    }

    #[test]
    fn spm_scalar_examples() {
        let eye = Array2::<f64>::eye(3);
        let f = array![0.0, 0.0, 1.0];
        assert_eq!(spm_logits(f.view(), eye.slice(ndarray::s![..2, ..]), 0.5), vec![0.5, 0.5]);
        let p = spm_logits(f.view(), eye.view(), 1.0);
        assert!((p[2] - 0.7310585786).abs() < 1e-9);
        let p = spm_logits(f.view(), eye.view(), 0.02);
        assert!(1.0 - p[2] < 1e-21);
        assert!((spm_bce(&[0.0, 0.0], &[true, false]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((spm_bce(&[0.0; 5], &[false; 5]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(spm_bce(&[40.0, -40.0], &[true, false]).unwrap() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let c = LossConfig::default();
        c.validate(512).unwrap();
        assert!(c.validate(10).is_err());
        assert!(LossConfig { tau: 0.0, ..c.clone() }.validate(512).is_err());
        assert!(LossConfig { gamma: 1.5, ..c.clone() }.validate(512).is_err());
        assert_eq!(c.warmup_steps(512, 16), 32);
    }

    #[test]
    fn random_bank_is_unit_norm() {
        let bank = MemoryBank::random(16, 8, &mut stream(0, &[])).unwrap();
        for r in bank.rows().rows() {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-6);
        }
    }
}
