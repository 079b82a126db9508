//! Evaluation metrics: Fréchet distance / FID, depth errors, and mIoU.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::dataio::{DepthMap, LabelMap, RgbImage, VOID};
use crate::error::{contract, Error, Result};

/// Gaussian fit of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    mu: DVector<f64>,
    cov: DMatrix<f64>,
    n: usize,
}

impl FeatureStats {
    pub fn new(mu: Vec<f64>, cov: Vec<f64>, n: usize) -> Result<Self> {
        let d = mu.len();
        if cov.len() != d * d {
            contract!("covariance has {} entries for dimension {d}", cov.len());
        }
        if n < 2 {
            return Err(Error::Metric(format!("need at least 2 samples, got {n}")));
        }
        Ok(Self {
            mu: DVector::from_vec(mu),
            cov: DMatrix::from_row_slice(d, d, &cov),
            n,
        })
    }

    /// Sample mean and unbiased covariance of the rows of `features`.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::Metric(format!("need at least 2 feature vectors, got {n}")));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            contract!("feature vectors have different lengths");
        }
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mu = x.row_mean().transpose();
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        Ok(Self { mu, cov, n })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mu.as_slice()
    }

    /// Covariance in column-major order (symmetric, so also row-major).
    pub fn covariance(&self) -> &[f64] {
        self.cov.as_slice()
    }

    pub fn count(&self) -> usize {
        self.n
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-6 * scale {
                contract!("covariance is not symmetric at ({i}, {j})");
            }
        }
    }
    Ok(())
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Principal square root of a symmetric PSD matrix, negative eigenvalues
/// floored at zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2 (Σ₁Σ₂)^½)`, clipped at 0.
///
/// `tr (Σ₁Σ₂)^½` is taken from the symmetric matrix `Σ₁^½ Σ₂ Σ₁^½`, which
/// has the same eigenvalues as `Σ₁Σ₂`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        contract!("feature dimensions differ: {} vs {}", a.dim(), b.dim());
    }
    check_symmetric(&a.cov)?;
    check_symmetric(&b.cov)?;
    let (s1, s2) = (symmetrize(&a.cov), symmetrize(&b.cov));
    let r1 = sqrt_psd(&s1);
    let inner = symmetrize(&(&r1 * &s2 * &r1));
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let diff = (&a.mu - &b.mu).norm_squared();
    let d = diff + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    if !d.is_finite() {
        return Err(Error::NonFinite {
            component: "frechet distance".into(),
        });
    }
    Ok(d.max(0.0))
}

/// Maps an image to a fixed-length feature vector.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    fn extract(&self, image: &RgbImage) -> Result<Vec<f64>>;

    fn extract_all(&self, images: &[RgbImage]) -> Result<Vec<Vec<f64>>> {
        images.iter().map(|im| self.extract(im)).collect()
    }
}

/// One feature: the mean over all pixels and channels.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanPixel;

impl FeatureExtractor for MeanPixel {
    fn dim(&self) -> usize {
        1
    }

    fn extract(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let data = image.data();
        Ok(vec![data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64])
    }
}

/// Per-channel mean and standard deviation over a `g × g` grid of cells.
#[derive(Debug, Clone, Copy)]
pub struct GridStats {
    pub grid: usize,
}

impl FeatureExtractor for GridStats {
    fn dim(&self) -> usize {
        self.grid * self.grid * 6
    }

    fn extract(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let (h, w, g) = (image.height(), image.width(), self.grid);
        if g == 0 || h < g || w < g {
            contract!("grid {g} does not fit a {h}x{w} image");
        }
        let data = image.data();
        let mut out = Vec::with_capacity(self.dim());
        for gy in 0..g {
            for gx in 0..g {
                let (y0, y1) = (gy * h / g, (gy + 1) * h / g);
                let (x0, x1) = (gx * w / g, (gx + 1) * w / g);
                for c in 0..3 {
                    let vals: Vec<f64> = (y0..y1)
                        .flat_map(|y| (x0..x1).map(move |x| (y, x)))
                        .map(|(y, x)| data[(c * h + y) * w + x] as f64)
                        .collect();
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                    out.push(mean);
                    out.push(var.sqrt());
                }
            }
        }
        Ok(out)
    }
}

pub fn fid(real: &[RgbImage], fake: &[RgbImage], extractor: &dyn FeatureExtractor) -> Result<f64> {
    if real.len() < 2 || fake.len() < 2 {
        return Err(Error::Metric(format!(
            "FID needs at least 2 images per set, got {} and {}",
            real.len(),
            fake.len()
        )));
    }
    let a = FeatureStats::from_features(&extractor.extract_all(real)?)?;
    let b = FeatureStats::from_features(&extractor.extract_all(fake)?)?;
    frechet_distance(&a, &b)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub rmse: f64,
    pub sq_rel: f64,
}

/// Eigen-protocol errors over paired depths in metres.
pub fn depth_errors(pred: &[f64], gt: &[f64]) -> Result<DepthMetrics> {
    if pred.len() != gt.len() {
        contract!("{} predictions for {} ground-truth values", pred.len(), gt.len());
    }
    if gt.is_empty() {
        return Err(Error::Metric("no valid depth pixels".into()));
    }
    if let Some(g) = gt.iter().find(|&&g| !(g > 0.0)) {
        return Err(Error::Metric(format!("ground-truth depth {g} is not positive")));
    }
    let n = gt.len() as f64;
    let (mut abs_rel, mut sq, mut sq_rel) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        let e = p - g;
        abs_rel += e.abs() / g;
        sq += e * e;
        sq_rel += e * e / g;
    }
    Ok(DepthMetrics {
        abs_rel: abs_rel / n,
        rmse: (sq / n).sqrt(),
        sq_rel: sq_rel / n,
    })
}

/// Errors over pixels valid in both maps, in metres.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap) -> Result<DepthMetrics> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        contract!("depth maps differ in size");
    }
    let (pm, gm) = (pred.meters(), gt.meters());
    let (mut p, mut g) = (Vec::new(), Vec::new());
    for i in 0..pm.len() {
        if pred.valid()[i] && gt.valid()[i] {
            p.push(pm[i]);
            g.push(gm[i]);
        }
    }
    depth_errors(&p, &g)
}

/// Accumulates metric values over many images by pooling their pixels.
#[derive(Debug, Clone, Default)]
pub struct DepthAccumulator {
    pred: Vec<f64>,
    gt: Vec<f64>,
}

impl DepthAccumulator {
    pub fn add(&mut self, pred: &DepthMap, gt: &DepthMap) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            contract!("depth maps differ in size");
        }
        let (pm, gm) = (pred.meters(), gt.meters());
        for i in 0..pm.len() {
            if pred.valid()[i] && gt.valid()[i] && gm[i] > 0.0 {
                self.pred.push(pm[i]);
                self.gt.push(gm[i]);
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<DepthMetrics> {
        depth_errors(&self.pred, &self.gt)
    }
}

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            n: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            contract!("{} counts for {num_classes} classes", counts.len());
        }
        Ok(Self { n: num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    /// Adds one prediction; pixels that are VOID in either map are skipped.
    pub fn add(&mut self, gt: &LabelMap, pred: &LabelMap) -> Result<()> {
        if (gt.height(), gt.width()) != (pred.height(), pred.width()) {
            contract!("prediction and ground truth differ in size");
        }
        for (&g, &p) in gt.classes().iter().zip(pred.classes()) {
            if g == VOID || p == VOID {
                continue;
            }
            let (g, p) = (g as usize, p as usize);
            if g >= self.n || p >= self.n {
                contract!("class index out of range for {} classes", self.n);
            }
            self.counts[g * self.n + p] += 1;
        }
        Ok(())
    }

    /// IoU per class; `None` where the union is empty.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..self.n).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..self.n).map(|g| self.get(g, c)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

pub fn miou(conf: &ConfusionMatrix) -> Result<f64> {
    let ious: Vec<f64> = conf.iou().into_iter().flatten().collect();
    if ious.is_empty() {
        return Err(Error::Metric("confusion matrix is empty".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Produces a label map from an RGB-D pair.
pub trait Segmenter {
    fn segment(&self, rgb: &RgbImage, depth: &DepthMap) -> Result<LabelMap>;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats1(mu: f64, var: f64) -> FeatureStats {
        FeatureStats::new(vec![mu], vec![var], 100).unwrap()
    }

    #[test]
    fn frechet_closed_forms() -> Result<()> {
        assert!((frechet_distance(&stats1(0.0, 1.0), &stats1(1.0, 1.0))? - 1.0).abs() < 1e-12);
        assert!((frechet_distance(&stats1(0.0, 1.0), &stats1(0.0, 4.0))? - 1.0).abs() < 1e-12);
        assert_eq!(frechet_distance(&stats1(3.0, 2.0), &stats1(3.0, 2.0))?, 0.0);
        Ok(())
    }

    #[test]
    fn frechet_diagonal_matches_closed_form() -> Result<()> {
        let a = FeatureStats::new(vec![0.0, 1.0], vec![1.0, 0.0, 0.0, 9.0], 10)?;
        let b = FeatureStats::new(vec![1.0, 1.0], vec![4.0, 0.0, 0.0, 1.0], 10)?;
        // 1 + (1 + 4 - 4) + (9 + 1 - 6)
        assert!((frechet_distance(&a, &b)? - 6.0).abs() < 1e-10);
        Ok(())
    }

    #[test]
    fn asymmetric_covariance_rejected() {
        let a = FeatureStats::new(vec![0.0, 0.0], vec![1.0, 0.5, 0.0, 1.0], 10).unwrap();
        assert!(matches!(frechet_distance(&a, &a), Err(Error::Contract(_))));
    }

    #[test]
    fn stats_from_features() -> Result<()> {
        let s = FeatureStats::from_features(&[vec![1.0, 0.0], vec![3.0, 2.0]])?;
        assert_eq!(s.mean(), &[2.0, 1.0]);
        assert_eq!(s.covariance(), &[2.0, 2.0, 2.0, 2.0]);
        assert!(FeatureStats::from_features(&[vec![1.0]]).is_err());
        Ok(())
    }

    #[test]
    fn depth_error_examples() -> Result<()> {
        let m = depth_errors(&[1.0], &[2.0])?;
        assert_eq!((m.abs_rel, m.rmse, m.sq_rel), (0.5, 1.0, 0.5));
        let m = depth_errors(&[2.0, 4.0], &[1.0, 2.0])?;
        assert!((m.abs_rel - 1.0).abs() < 1e-12);
        assert!((m.rmse - 2.5f64.sqrt()).abs() < 1e-12);
        assert!((m.sq_rel - 1.5).abs() < 1e-12);
        assert!(depth_errors(&[], &[]).is_err());
        Ok(())
    }

    #[test]
    fn miou_examples() -> Result<()> {
        let perfect = ConfusionMatrix::from_counts(2, vec![3, 0, 0, 5])?;
        assert_eq!(miou(&perfect)?, 1.0);
        let mixed = ConfusionMatrix::from_counts(2, vec![1, 1, 1, 1])?;
        assert!((miou(&mixed)? - 1.0 / 3.0).abs() < 1e-12);
        let absent = ConfusionMatrix::from_counts(3, vec![2, 0, 0, 0, 2, 0, 0, 0, 0])?;
        assert_eq!(miou(&absent)?, 1.0);
        assert!(miou(&ConfusionMatrix::new(2)).is_err());
        Ok(())
    }
}
