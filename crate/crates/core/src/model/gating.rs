//! Value-level gating: logits, privacy isolation, Gumbel-Softmax and top-1
//! selection.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{self, Tensor};

/// Stand-in for `-inf` in isolated logits. Anything at or below
/// [`MASK_THRESHOLD`] is treated as inadmissible.
pub const MASKED_LOGIT: f64 = -1e9;
pub const MASK_THRESHOLD: f64 = -1e8;

pub fn is_masked(v: f64) -> bool {
    v <= MASK_THRESHOLD
}

/// Whether expert `j` may receive a token with privacy bit `sensitive`.
pub fn admissible(sensitive: bool, j: usize, privacy_experts: usize) -> bool {
    sensitive == (j < privacy_experts)
}

/// `g_i = W_g h_i + b_g` for every row of `h[L×d]`, with `w_g` stored `[d×K]`.
pub fn gate_logits(h: &Tensor, w_g: &Tensor, b_g: &Tensor) -> Result<Tensor> {
    let g = tensor::matmul(h, w_g)?;
    let k = g.shape()[1];
    if b_g.len() != k {
        return Err(Error::Shape {
            op: "gate_logits",
            left: g.shape().to_vec(),
            right: b_g.shape().to_vec(),
        });
    }
    let data = g
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + b_g.data()[i % k])
        .collect();
    Tensor::new(g.shape().to_vec(), data)
}

/// Sensitive tokens keep only the privacy-expert logits, non-sensitive tokens
/// only the rest; every other entry becomes [`MASKED_LOGIT`].
pub fn apply_privacy_isolation(g: &Tensor, mask: &[bool], privacy_experts: usize) -> Result<Tensor> {
    let (l, k) = g.dims2();
    if mask.len() != l {
        return Err(Error::Shape {
            op: "apply_privacy_isolation",
            left: g.shape().to_vec(),
            right: vec![mask.len()],
        });
    }
    let mut out = g.clone();
    for (i, row) in out.data_mut().chunks_mut(k).enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            if !admissible(mask[i], j, privacy_experts) {
                *v = MASKED_LOGIT;
            }
        }
    }
    Ok(out)
}

/// Row-wise `softmax((g' + γ) / τ)`; masked entries are exactly zero.
pub fn gumbel_softmax_with_noise(g_prime: &Tensor, tau: f64, gamma: &Tensor) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    if g_prime.shape() != gamma.shape() {
        return Err(Error::Shape {
            op: "gumbel_softmax",
            left: g_prime.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    let (l, k) = g_prime.dims2();
    let mut data = Vec::with_capacity(l * k);
    for i in 0..l {
        let row = g_prime.row(i);
        let adm: Vec<bool> = row.iter().map(|v| !is_masked(*v)).collect();
        let noisy: Vec<f64> = row.iter().zip(gamma.row(i)).map(|(a, b)| a + b).collect();
        match tensor::masked_softmax_slice(&noisy, tau, &adm) {
            Some(z) => data.extend(z),
            None => return Err(Error::NoAdmissibleExpert { token: i }),
        }
    }
    Tensor::new(g_prime.shape().to_vec(), data)
}

/// Draws fresh Gumbel noise (one value per token and expert) and applies
/// [`gumbel_softmax_with_noise`]. Returns `(z, gamma)`.
pub fn gumbel_softmax(g_prime: &Tensor, tau: f64, rng: &mut RngStream) -> Result<(Tensor, Tensor)> {
    let gamma = Tensor::new(
        g_prime.shape().to_vec(),
        crate::rng::gumbel_sample(rng, g_prime.len()),
    )?;
    let z = gumbel_softmax_with_noise(g_prime, tau, &gamma)?;
    Ok((z, gamma))
}

/// Index of the largest admissible `g' + γ` entry; lowest index on ties.
pub fn select_expert(g_prime_row: &[f64], gamma_row: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, (g, n)) in g_prime_row.iter().zip(gamma_row).enumerate() {
        if is_masked(*g) {
            continue;
        }
        let v = g + n;
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best.map(|(j, _)| j)
}

/// One-hot top-1 selection `o_i = one_hot(argmax_j (g'_ij + γ_ij))`.
pub fn hard_select(g_prime: &Tensor, gamma: &Tensor) -> Result<Tensor> {
    let (l, k) = g_prime.dims2();
    let mut out = vec![0.0; l * k];
    for i in 0..l {
        let j = select_expert(g_prime.row(i), gamma.row(i)).ok_or(Error::NoAdmissibleExpert { token: i })?;
        out[i * k + j] = 1.0;
    }
    Tensor::new(g_prime.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weight_gate_returns_bias() {
        let h = Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let w = Tensor::zeros(&[2, 3]);
        let b = Tensor::vector(vec![0.1, 0.2, 0.3]);
        let g = gate_logits(&h, &w, &b).unwrap();
        assert_eq!(g.row(0), b.data());
        assert_eq!(g.row(1), b.data());
    }

    #[test]
    fn gate_hand_case() {
        // W_g = [[2], [-1]] as a d→K map; stored transposed as [d×K] = [[2, -1]]
        let h = Tensor::from_rows(&[vec![3.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![2.0, -1.0]]).unwrap();
        let b = Tensor::vector(vec![0.0, 1.0]);
        assert_eq!(gate_logits(&h, &w, &b).unwrap().data(), &[6.0, -2.0]);
    }

    #[test]
    fn isolation_branches() {
        let g = Tensor::from_rows(&vec![vec![5.0, 1.0, 9.0, 2.0, 3.0, 4.0, 6.0, 7.0]; 2]).unwrap();
        let iso = apply_privacy_isolation(&g, &[true, false], 2).unwrap();
        assert_eq!(&iso.row(0)[..2], &[5.0, 1.0]);
        assert!(iso.row(0)[2..].iter().all(|v| *v == MASKED_LOGIT));
        assert!(iso.row(1)[..2].iter().all(|v| *v == MASKED_LOGIT));
        assert_eq!(&iso.row(1)[2..], &g.row(1)[2..]);
        let twice = apply_privacy_isolation(&iso, &[true, false], 2).unwrap();
        assert_eq!(twice, iso);
    }

    #[test]
    fn zero_noise_uniform_logits_is_uniform_over_admissible() {
        let g = Tensor::from_rows(&[vec![0.0; 8]]).unwrap();
        let iso = apply_privacy_isolation(&g, &[false], 2).unwrap();
        let z = gumbel_softmax_with_noise(&iso, 1.0, &Tensor::zeros(&[1, 8])).unwrap();
        assert_eq!(&z.data()[..2], &[0.0, 0.0]);
        z.data()[2..].iter().for_each(|v| assert!((v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn masked_entries_zero_under_any_noise() {
        let g = Tensor::from_rows(&[vec![0.3, -0.2, 1.0, 0.0]]).unwrap();
        let iso = apply_privacy_isolation(&g, &[true], 2).unwrap();
        let mut rng = RngStream::new(5, "gumbel");
        for _ in 0..100 {
            let (z, _) = gumbel_softmax(&iso, 0.5, &mut rng).unwrap();
            assert_eq!(&z.data()[2..], &[0.0, 0.0]);
        }
    }

    #[test]
    fn low_temperature_concentrates() {
        let g = Tensor::from_rows(&[vec![0.1, 0.5, 0.3]]).unwrap();
        let z = gumbel_softmax_with_noise(&g, 0.01, &Tensor::zeros(&[1, 3])).unwrap();
        assert!(z.data().iter().cloned().fold(0.0, f64::max) >= 0.999);
    }

    #[test]
    fn all_masked_row_errors() {
        let g = Tensor::from_rows(&[vec![MASKED_LOGIT; 3]]).unwrap();
        assert!(matches!(
            gumbel_softmax_with_noise(&g, 1.0, &Tensor::zeros(&[1, 3])),
            Err(Error::NoAdmissibleExpert { token: 0 })
        ));
    }

    #[test]
    fn hard_select_argmax_and_ties() {
        let mut row = vec![3.0, 1.0];
        row.extend([MASKED_LOGIT; 6]);
        let g = Tensor::from_rows(&[row]).unwrap();
        let o = hard_select(&g, &Tensor::zeros(&[1, 8])).unwrap();
        assert_eq!(o.data()[0], 1.0);
        assert_eq!(o.data().iter().sum::<f64>(), 1.0);

        let g = Tensor::from_rows(&[vec![MASKED_LOGIT, 2.0, 0.0, 1.0, 2.0]]).unwrap();
        let o = hard_select(&g, &Tensor::zeros(&[1, 5])).unwrap();
        assert_eq!(o.data(), &[0.0, 1.0, 0.0, 0.0, 0.0]);
    }
}
