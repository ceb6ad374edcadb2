use crate::error::{Error, Result};

/// Numerically stable softmax (max subtraction).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidInput("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("softmax of a non-finite vector".into()));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Softmax without input validation, for hot paths whose inputs are known finite.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    v.iter_mut().for_each(|x| *x *= inv);
}

/// `log softmax(v)[index]`, computed without forming the full distribution.
pub(crate) fn log_softmax_at(v: &[f64], index: usize) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = v.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    v[index] - lse
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateVector("zero-norm vector in cosine".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn softmax_anchors() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for c in [-3.0, 0.0, 17.5] {
            let p = softmax(&[c, c, c]).unwrap();
            for x in p {
                assert!((x - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        // e^2, e^0, e^1 normalized
        let (e2, e1) = (2f64.exp(), 1f64.exp());
        let z = e2 + 1.0 + e1;
        let want = [e2 / z, 1.0 / z, e1 / z];
        let got = softmax(&[2.0, 0.0, 1.0]).unwrap();
        for ((g, w), lit) in got.iter().zip(want).zip([0.66524, 0.09003, 0.24473]) {
            assert!((g - w).abs() < 1e-15);
            assert!((g - lit).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax(&[1.0, f64::INFINITY]).is_err());
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn cosine_anchors() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 1.0], &[1.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-15);
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn log_softmax_matches_softmax() {
        let v = [0.3, -1.2, 2.5];
        let p = softmax(&v).unwrap();
        for (i, pi) in p.iter().enumerate() {
            assert!((log_softmax_at(&v, i) - pi.ln()).abs() < 1e-14);
        }
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-30.0f64..30.0, 1..12)
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(v in vec_strategy(), c in -50.0f64..50.0) {
            let p = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0));
        }

        #[test]
        fn softmax_preserves_argmax(v in vec_strategy()) {
            let p = softmax(&v).unwrap();
            prop_assert_eq!(v[argmax(&p)], v[argmax(&v)]);
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            u in prop::collection::vec(-5.0f64..5.0, 4),
            v in prop::collection::vec(-5.0f64..5.0, 4),
            a in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&u) > 1e-6 && norm(&v) > 1e-6);
            let c = cosine(&u, &v).unwrap();
            prop_assert!((c - cosine(&v, &u).unwrap()).abs() < 1e-15);
            let scaled: Vec<f64> = u.iter().map(|x| x * a).collect();
            prop_assert!((c - cosine(&scaled, &v).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }
}
