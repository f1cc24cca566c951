use super::Tensor;
use crate::error::{Error, Result};

/// Temperature applied to prediction logits.
pub const DEFAULT_TAU: f64 = 0.1;

/// `softmax(v / tau)`.
pub fn softmax_temp(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    Ok(log_softmax_temp(v, tau)?.into_iter().map(f64::exp).collect())
}

pub fn log_softmax_temp(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let m = v.iter().fold(f64::NEG_INFINITY, |m, x| m.max(*x)) / tau;
    let lse = m + v.iter().map(|x| (x / tau - m).exp()).sum::<f64>().ln();
    Ok(v.iter().map(|x| x / tau - lse).collect())
}

/// Weighted KL divergence between per-row target distributions and temperature-softmaxed
/// predictions. Returns the loss and its gradient with respect to `pred`.
///
/// `targets` rows must already be distributions. Row `i` is weighted by
/// `weights[i] * part_weights[i]`; the sum is divided by the number of rows with a
/// positive weight, so a fully masked input gives loss 0 and an all-zero gradient.
pub fn kl_to_distribution(
    pred: &Tensor,
    targets: &Tensor,
    weights: &[f64],
    tau: f64,
    part_weights: Option<&[f64]>,
) -> Result<(f64, Tensor)> {
    let (k, l) = pred.dims2()?;
    if targets.shape() != pred.shape() || weights.len() != k {
        return Err(Error::shape(format!(
            "kl: pred {:?}, target {:?}, {} weights",
            pred.shape(),
            targets.shape(),
            weights.len()
        )));
    }
    if let Some(pw) = part_weights {
        if pw.len() != k {
            return Err(Error::shape(format!("{} part weights for {k} rows", pw.len())));
        }
    }
    let mut grad = Tensor::zeros(&[k, l]);
    let row_weight = |i: usize| weights[i] * part_weights.map_or(1.0, |pw| pw[i]);
    let active = (0..k).filter(|&i| weights[i] > 0.0).count();
    if active == 0 {
        return Ok((0.0, grad));
    }
    let norm = 1.0 / active as f64;
    let mut loss = 0.0;
    for i in 0..k {
        let w = row_weight(i);
        if w <= 0.0 {
            continue;
        }
        let logq = log_softmax_temp(pred.row(i), tau)?;
        let p = targets.row(i);
        let mut kl = 0.0;
        for (pj, lq) in p.iter().zip(&logq) {
            if *pj > 0.0 {
                kl += pj * (pj.ln() - lq);
            }
        }
        loss += w * norm * kl.max(0.0);
        let scale = w * norm / tau;
        for ((g, pj), lq) in grad.row_mut(i).iter_mut().zip(p).zip(&logq) {
            *g = scale * (lq.exp() - pj);
        }
    }
    Ok((loss, grad))
}

/// KL loss against soft label rows, which are renormalized to sum to one.
pub fn kl_discret_loss(
    pred: &Tensor,
    target_labels: &Tensor,
    weights: &[f64],
    tau: f64,
    part_weights: Option<&[f64]>,
) -> Result<(f64, Tensor)> {
    let (k, _) = target_labels.dims2()?;
    let mut targets = target_labels.clone();
    for i in 0..k {
        let row = targets.row_mut(i);
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    kl_to_distribution(pred, &targets, weights, tau, part_weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_examples() {
        let p = softmax_temp(&[0.0, 1.0], 1.0).unwrap();
        assert!((p[0] - 0.26894142137).abs() < 1e-10);
        assert!((p[1] - 0.73105857863).abs() < 1e-10);
        let u = softmax_temp(&[3.0; 4], 0.1).unwrap();
        assert!(u.iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert!(softmax_temp(&[1.0], 0.0).is_err());
        assert!(softmax_temp(&[1.0], -1.0).is_err());
    }

    #[test]
    fn kl_two_bin() {
        let pred = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        let target = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let (loss, _) = kl_discret_loss(&pred, &target, &[1.0], 1.0, None).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn kl_zero_when_matching() {
        let target = Tensor::from_vec(&[2, 3], vec![0.2, 0.3, 0.5, 0.1, 0.1, 0.8]).unwrap();
        let tau = 0.1;
        let logits: Vec<f64> = target.data().iter().map(|p| p.ln() * tau).collect();
        let pred = Tensor::from_vec(&[2, 3], logits).unwrap();
        let (loss, _) = kl_discret_loss(&pred, &target, &[1.0, 1.0], tau, None).unwrap();
        assert!(loss < 1e-9, "{loss}");
    }

    #[test]
    fn masked_rows_contribute_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pred = Tensor::from_vec(&[2, 4], (0..8).map(|_| rng.random::<f64>()).collect()).unwrap();
        let t1 = Tensor::from_vec(&[2, 4], vec![0.1, 0.2, 0.3, 0.4, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let t2 = Tensor::from_vec(&[2, 4], vec![0.1, 0.2, 0.3, 0.4, 0.0, 0.0, 0.0, 9.0]).unwrap();
        let (a, ga) = kl_discret_loss(&pred, &t1, &[1.0, 0.0], 0.1, None).unwrap();
        let (b, gb) = kl_discret_loss(&pred, &t2, &[1.0, 0.0], 0.1, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
        assert!(ga.row(1).iter().all(|g| *g == 0.0));

        let (z, gz) = kl_discret_loss(&pred, &t1, &[0.0, 0.0], 0.1, None).unwrap();
        assert_eq!(z, 0.0);
        assert!(gz.data().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn part_weights_scale_rows() {
        let pred = Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let target = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let (a, _) = kl_discret_loss(&pred, &target, &[1.0, 1.0], 1.0, None).unwrap();
        let (b, _) = kl_discret_loss(&pred, &target, &[1.0, 1.0], 1.0, Some(&[2.0, 0.0])).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn kl_gradcheck() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (k, l) = (3, 9);
            let pred = Tensor::from_vec(&[k, l], (0..k * l).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
            let target = Tensor::from_vec(&[k, l], (0..k * l).map(|_| rng.random::<f64>()).collect()).unwrap();
            let w = [1.0, 0.5, 0.0];
            let (_, g) = kl_discret_loss(&pred, &target, &w, 0.1, None).unwrap();
            let mut pv = pred.data().to_vec();
            let err = grad_check(&mut pv, g.data(), 1e-6, |v| {
                let p = Tensor::from_vec(&[k, l], v.to_vec()).unwrap();
                kl_discret_loss(&p, &target, &w, 0.1, None).unwrap().0
            })
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
