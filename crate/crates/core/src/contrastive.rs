//! Multi-positive InfoNCE.
//!
//! Every image–text pair whose labels agree is a positive; every other pair in
//! the batch is a negative. For image anchor `i` with positive set `P(i)`:
//!
//! ```text
//! ℓᵢ = -(1/|P(i)|) Σ_{j∈P(i)} log softmax_j(logits[i, ·])
//! ```
//!
//! The image→text loss is the mean of `ℓᵢ` over images, text→image is the
//! same over columns, and the reported loss is the mean of both directions.
//! With an identity mask this is exactly the symmetric CLIP objective.

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::matrix::{log_sum_exp, Matrix};

/// `mask[i][j]` is true iff image `i` and text `j` share a class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl PositiveMask {
    pub fn from_labels<L: PartialEq>(image_labels: &[L], text_labels: &[L]) -> Self {
        let mut bits = Vec::with_capacity(image_labels.len() * text_labels.len());
        for a in image_labels {
            for b in text_labels {
                bits.push(a == b);
            }
        }
        Self {
            rows: image_labels.len(),
            cols: text_labels.len(),
            bits,
        }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged mask rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            bits: rows.concat(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let labels: Vec<usize> = (0..n).collect();
        Self::from_labels(&labels, &labels)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    /// Rows reordered so that new row `k` is old row `perm[k]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let mut bits = Vec::with_capacity(self.bits.len());
        for &p in perm {
            bits.extend_from_slice(&self.bits[p * self.cols..(p + 1) * self.cols]);
        }
        Self {
            rows: self.rows,
            cols: self.cols,
            bits,
        }
    }

    pub fn permute_cols(&self, perm: &[usize]) -> Self {
        let mut bits = Vec::with_capacity(self.bits.len());
        for i in 0..self.rows {
            for &p in perm {
                bits.push(self.get(i, p));
            }
        }
        Self {
            rows: self.rows,
            cols: self.cols,
            bits,
        }
    }

    /// Every row and every column must hold at least one positive.
    pub fn check_coverage(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Mask("empty batch".into()));
        }
        if let Some(i) = (0..self.rows).find(|&i| !(0..self.cols).any(|j| self.get(i, j))) {
            return Err(Error::Mask(format!("image row {i} has no positive text")));
        }
        if let Some(j) = (0..self.cols).find(|&j| !(0..self.rows).any(|i| self.get(i, j))) {
            return Err(Error::Mask(format!("text column {j} has no positive image")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossOutput {
    pub value: f64,
    pub image_to_text: f64,
    pub text_to_image: f64,
}

/// `logit_scale · ⟨imgᵢ, txtⱼ⟩` for every pair.
pub fn similarity_logits(
    img: &EmbeddingMatrix,
    txt: &EmbeddingMatrix,
    logit_scale: f64,
) -> Result<Matrix> {
    if img.dim() != txt.dim() {
        return Err(Error::Shape(format!(
            "image dim {} != text dim {}",
            img.dim(),
            txt.dim()
        )));
    }
    if !(logit_scale.is_finite() && logit_scale > 0.0) {
        return Err(Error::InvalidInput(format!(
            "logit scale must be positive, got {logit_scale}"
        )));
    }
    let mut logits = img.as_matrix().matmul_t(txt.as_matrix())?;
    logits.scale(logit_scale);
    Ok(logits)
}

pub fn multi_positive_infonce(logits: &Matrix, mask: &PositiveMask) -> Result<LossOutput> {
    multi_positive_infonce_with_grad(logits, mask).map(|(loss, _)| loss)
}

/// Loss plus its gradient with respect to every logit.
pub fn multi_positive_infonce_with_grad(
    logits: &Matrix,
    mask: &PositiveMask,
) -> Result<(LossOutput, Matrix)> {
    let (n, m) = (logits.rows(), logits.cols());
    if mask.rows() != n || mask.cols() != m {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match logits {n}x{m}",
            mask.rows(),
            mask.cols()
        )));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits contain NaN or Inf".into()));
    }
    mask.check_coverage()?;

    let mut grad = Matrix::zeros(n, m);

    // image -> text: softmax over each row.
    let mut i2t = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let lse = log_sum_exp(row.iter().copied());
        let positives: Vec<usize> = (0..m).filter(|&j| mask.get(i, j)).collect();
        let inv_p = 1.0 / positives.len() as f64;
        i2t += positives.iter().map(|&j| lse - row[j]).sum::<f64>() * inv_p;
        let g = grad.row_mut(i);
        for j in 0..m {
            g[j] += 0.5 / n as f64 * (row[j] - lse).exp();
        }
        for &j in &positives {
            g[j] -= 0.5 / n as f64 * inv_p;
        }
    }
    i2t /= n as f64;

    // text -> image: softmax over each column.
    let mut t2i = 0.0;
    for j in 0..m {
        let col = (0..n).map(|i| logits.get(i, j));
        let lse = log_sum_exp(col);
        let positives: Vec<usize> = (0..n).filter(|&i| mask.get(i, j)).collect();
        let inv_p = 1.0 / positives.len() as f64;
        t2i += positives
            .iter()
            .map(|&i| lse - logits.get(i, j))
            .sum::<f64>()
            * inv_p;
        for i in 0..n {
            let v = grad.get(i, j) + 0.5 / m as f64 * (logits.get(i, j) - lse).exp();
            grad.set(i, j, v);
        }
        for &i in &positives {
            let v = grad.get(i, j) - 0.5 / m as f64 * inv_p;
            grad.set(i, j, v);
        }
    }
    t2i /= m as f64;

    let value = 0.5 * (i2t + t2i);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {value}")));
    }
    Ok((
        LossOutput {
            value,
            image_to_text: i2t,
            text_to_image: t2i,
        },
        grad,
    ))
}

/// A contrastive objective over raw (not re-normalized) embedding matrices,
/// able to report its analytic gradient.
pub trait ContrastiveObjective {
    fn loss(&self, img: &Matrix, txt: &Matrix, mask: &PositiveMask) -> Result<f64>;

    /// Loss and gradients with respect to `img` and `txt`.
    fn loss_and_grad(
        &self,
        img: &Matrix,
        txt: &Matrix,
        mask: &PositiveMask,
    ) -> Result<(f64, Matrix, Matrix)>;
}

/// Multi-positive InfoNCE on `scale · img · txtᵀ`.
#[derive(Debug, Clone, Copy)]
pub struct MultiPositiveInfoNce {
    pub logit_scale: f64,
}

impl MultiPositiveInfoNce {
    fn logits(&self, img: &Matrix, txt: &Matrix) -> Result<Matrix> {
        let mut logits = img.matmul_t(txt)?;
        logits.scale(self.logit_scale);
        Ok(logits)
    }
}

impl ContrastiveObjective for MultiPositiveInfoNce {
    fn loss(&self, img: &Matrix, txt: &Matrix, mask: &PositiveMask) -> Result<f64> {
        Ok(multi_positive_infonce(&self.logits(img, txt)?, mask)?.value)
    }

    fn loss_and_grad(
        &self,
        img: &Matrix,
        txt: &Matrix,
        mask: &PositiveMask,
    ) -> Result<(f64, Matrix, Matrix)> {
        let (loss, g) = multi_positive_infonce_with_grad(&self.logits(img, txt)?, mask)?;
        let (d_img, d_txt) = backprop_similarity(&g, img, txt, self.logit_scale)?;
        Ok((loss.value, d_img, d_txt))
    }
}

/// Chain rule through `logits = scale · img · txtᵀ`.
pub fn backprop_similarity(
    grad_logits: &Matrix,
    img: &Matrix,
    txt: &Matrix,
    logit_scale: f64,
) -> Result<(Matrix, Matrix)> {
    let mut d_img = grad_logits.matmul(txt)?;
    d_img.scale(logit_scale);
    let mut d_txt = grad_logits.transpose().matmul(img)?;
    d_txt.scale(logit_scale);
    Ok((d_img, d_txt))
}

/// Gradient magnitudes below this are compared absolutely in
/// [`gradient_check`], where f64 cancellation dominates the relative error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Max relative error between the objective's analytic gradient and central
/// finite differences over every entry of both embedding matrices.
pub fn gradient_check<O: ContrastiveObjective + ?Sized>(
    objective: &O,
    img: &Matrix,
    txt: &Matrix,
    mask: &PositiveMask,
    epsilon: f64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidInput(format!(
            "epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let (_, d_img, d_txt) = objective.loss_and_grad(img, txt, mask)?;
    let mut worst = 0.0f64;

    let mut probe = |which: usize, analytic: &Matrix| -> Result<()> {
        let base = if which == 0 { img } else { txt };
        let mut plus = base.clone();
        for idx in 0..base.as_slice().len() {
            let orig = base.as_slice()[idx];
            plus.as_mut_slice()[idx] = orig + epsilon;
            let f_plus = if which == 0 {
                objective.loss(&plus, txt, mask)?
            } else {
                objective.loss(img, &plus, mask)?
            };
            plus.as_mut_slice()[idx] = orig - epsilon;
            let f_minus = if which == 0 {
                objective.loss(&plus, txt, mask)?
            } else {
                objective.loss(img, &plus, mask)?
            };
            plus.as_mut_slice()[idx] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * epsilon);
            let a = analytic.as_slice()[idx];
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
        Ok(())
    };
    probe(0, &d_img)?;
    probe(1, &d_txt)?;
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scalar oracle: log-probabilities from the textbook softmax definition,
    /// no shifting.
    fn naive_direction(logits: &[Vec<f64>], mask: &[Vec<bool>]) -> f64 {
        let mut total = 0.0;
        for (row, mrow) in logits.iter().zip(mask) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let pos: Vec<f64> = row
                .iter()
                .zip(mrow)
                .filter(|(_, &m)| m)
                .map(|(v, _)| (v.exp() / z).ln())
                .collect();
            total += -pos.iter().sum::<f64>() / pos.len() as f64;
        }
        total / logits.len() as f64
    }

    fn naive_loss(logits: &[Vec<f64>], mask: &[Vec<bool>]) -> f64 {
        let t = |m: &[Vec<f64>]| -> Vec<Vec<f64>> {
            (0..m[0].len())
                .map(|j| m.iter().map(|r| r[j]).collect())
                .collect()
        };
        let tb = |m: &[Vec<bool>]| -> Vec<Vec<bool>> {
            (0..m[0].len())
                .map(|j| m.iter().map(|r| r[j]).collect())
                .collect()
        };
        0.5 * (naive_direction(logits, mask) + naive_direction(&t(logits), &tb(mask)))
    }

    #[test]
    fn single_pair_has_zero_loss() {
        for v in [-3.0, 0.0, 7.5] {
            let logits = Matrix::from_rows(&[vec![v]]).unwrap();
            let out = multi_positive_infonce(&logits, &PositiveMask::identity(1)).unwrap();
            assert_eq!(out.value, 0.0);
        }
    }

    #[test]
    fn two_by_two_identity_value() {
        // -ln(e / (e + 1)) evaluated by hand to 17 digits.
        let expected = 0.313_261_687_518_222_8;
        let logits = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let out = multi_positive_infonce(&logits, &PositiveMask::identity(2)).unwrap();
        assert!((out.value - expected).abs() < 1e-12, "{}", out.value);
        assert!((out.image_to_text - out.text_to_image).abs() < 1e-15);
    }

    #[test]
    fn all_positive_matches_bruteforce() {
        let rows = vec![vec![0.3, -1.2], vec![2.0, 0.5]];
        let mask = vec![vec![true, true], vec![true, true]];
        let logits = Matrix::from_rows(&rows).unwrap();
        let out =
            multi_positive_infonce(&logits, &PositiveMask::from_rows(&mask).unwrap()).unwrap();
        // Four cross-entropy terms: each row and each column against its own softmax.
        let mut terms = Vec::new();
        for r in &rows {
            let z = r[0].exp() + r[1].exp();
            terms.push(-((r[0].exp() / z).ln() + (r[1].exp() / z).ln()) / 2.0);
        }
        for j in 0..2 {
            let z = rows[0][j].exp() + rows[1][j].exp();
            terms.push(-((rows[0][j].exp() / z).ln() + (rows[1][j].exp() / z).ln()) / 2.0);
        }
        let expected = (terms[0] + terms[1]) / 4.0 + (terms[2] + terms[3]) / 4.0;
        assert!((out.value - expected).abs() < 1e-12);
        assert!((out.value - naive_loss(&rows, &mask)).abs() < 1e-12);
    }

    #[test]
    fn random_batches_match_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(1..9);
            let m = rng.random_range(1..9);
            let classes = rng.random_range(1..4);
            let il: Vec<usize> = (0..n).map(|i| i % classes).collect();
            let tl: Vec<usize> = (0..m).map(|j| j % classes).collect();
            let mask = PositiveMask::from_labels(&il, &tl);
            if mask.check_coverage().is_err() {
                continue;
            }
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.random_range(-4.0..4.0)).collect())
                .collect();
            let bools: Vec<Vec<bool>> = (0..n)
                .map(|i| (0..m).map(|j| mask.get(i, j)).collect())
                .collect();
            let got = multi_positive_infonce(&Matrix::from_rows(&rows).unwrap(), &mask)
                .unwrap()
                .value;
            assert!((got - naive_loss(&rows, &bools)).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_masks_and_logits() {
        let logits = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let no_pos = PositiveMask::from_rows(&[vec![true, false], vec![false, false]]).unwrap();
        assert!(matches!(
            multi_positive_infonce(&logits, &no_pos),
            Err(Error::Mask(_))
        ));
        let col_missing = PositiveMask::from_rows(&[vec![true, false], vec![true, false]]).unwrap();
        assert!(matches!(
            multi_positive_infonce(&logits, &col_missing),
            Err(Error::Mask(_))
        ));
        let nan = Matrix::from_rows(&[vec![f64::NAN, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            multi_positive_infonce(&nan, &PositiveMask::identity(2)),
            Err(Error::NonFinite(_))
        ));
        assert!(multi_positive_infonce(&logits, &PositiveMask::identity(3)).is_err());
    }

    /// Pairwise products summed with Neumaier compensation.
    fn compensated_dot(a: &[f64], b: &[f64]) -> f64 {
        let (mut sum, mut c) = (0.0f64, 0.0f64);
        for (x, y) in a.iter().zip(b) {
            let p = x * y;
            let t = sum + p;
            if sum.abs() >= p.abs() {
                c += (sum - t) + p;
            } else {
                c += (p - t) + sum;
            }
            sum = t;
        }
        sum + c
    }

    #[test]
    fn similarity_logits_matches_dot_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rand_rows = |n: usize| {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            EmbeddingMatrix::normalize(Matrix::from_rows(&rows).unwrap()).unwrap()
        };
        let img = rand_rows(3);
        let txt = rand_rows(4);
        let scale = 3.7;
        let logits = similarity_logits(&img, &txt, scale).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let oracle = scale * compensated_dot(img.row(i), txt.row(j));
                assert!((logits.get(i, j) - oracle).abs() < 1e-6);
                assert!(logits.get(i, j).abs() <= scale + 1e-12);
            }
        }
    }

    #[test]
    fn similarity_trivial_cases() {
        let e = EmbeddingMatrix::normalize(
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        )
        .unwrap();
        let l = similarity_logits(&e, &e, 1.0).unwrap();
        assert_eq!(l.as_slice(), &[1.0, 0.0, 0.0, 1.0]);
        let other =
            EmbeddingMatrix::normalize(Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap()).unwrap();
        assert!(similarity_logits(&e, &other, 1.0).is_err());
    }

    fn random_embeddings(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        EmbeddingMatrix::normalize(Matrix::from_rows(&rows).unwrap())
            .unwrap()
            .into_matrix()
    }

    #[test]
    fn gradient_check_random_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_embeddings(&mut rng, 4, 6);
        let txt = random_embeddings(&mut rng, 4, 6);
        let mask = PositiveMask::from_labels(&[0, 1, 0, 1], &[1, 0, 1, 0]);
        let obj = MultiPositiveInfoNce { logit_scale: 2.5 };
        let err = gradient_check(&obj, &img, &txt, &mask, 1e-5).unwrap();
        assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn balanced_direction_gives_zero_gradient() {
        // Identical embeddings and an all-positive mask: every softmax is
        // uniform and equals the positive weight, so the gradient vanishes.
        let row = vec![0.6, 0.8];
        let img = Matrix::from_rows(&[row.clone(), row.clone(), row.clone()]).unwrap();
        let txt = img.clone();
        let mask = PositiveMask::from_labels(&[0, 0, 0], &[0, 0, 0]);
        let obj = MultiPositiveInfoNce { logit_scale: 1.0 };
        let (_, gi, gt) = obj.loss_and_grad(&img, &txt, &mask).unwrap();
        assert!(gi.as_slice().iter().chain(gt.as_slice()).all(|v| v.abs() < 1e-15));
        assert!(gradient_check(&obj, &img, &txt, &mask, 1e-6).unwrap() < 1e-5);
    }

    #[test]
    fn single_pair_gradient_is_zero() {
        let img = Matrix::from_rows(&[vec![0.6, 0.8]]).unwrap();
        let txt = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let obj = MultiPositiveInfoNce { logit_scale: 5.0 };
        let (l, gi, gt) = obj
            .loss_and_grad(&img, &txt, &PositiveMask::identity(1))
            .unwrap();
        assert_eq!(l, 0.0);
        assert!(gi.as_slice().iter().chain(gt.as_slice()).all(|&v| v == 0.0));
    }

    #[test]
    fn epsilon_out_of_range() {
        let img = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let obj = MultiPositiveInfoNce { logit_scale: 1.0 };
        let mask = PositiveMask::identity(1);
        assert!(gradient_check(&obj, &img, &img, &mask, 1e-2).is_err());
        assert!(gradient_check(&obj, &img, &img, &mask, 1e-9).is_err());
    }

    #[test]
    fn raising_a_positive_logit_lowers_loss() {
        let mask = PositiveMask::from_labels(&[0, 1, 1], &[0, 1, 0]);
        let base = Matrix::from_rows(&[
            vec![0.2, -0.1, 0.4],
            vec![0.0, 0.3, 0.1],
            vec![-0.5, 0.2, 0.9],
        ])
        .unwrap();
        let l0 = multi_positive_infonce(&base, &mask).unwrap().value;
        assert!(l0 > 0.0);
        let mut bumped = base.clone();
        bumped.set(1, 1, 0.8);
        let l1 = multi_positive_infonce(&bumped, &mask).unwrap().value;
        assert!(l1 < l0);
    }
}
