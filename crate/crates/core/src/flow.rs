//! Rectified-flow transport between Gaussian noise and one-hot masks.
//!
//! Training pairs a noise sample `x0` with a mask `x1`, moves along the
//! straight path `xt = t·x1 + (1 − t)·x0`, and regresses the constant
//! velocity `x1 − x0`. Sampling integrates the learned field with forward
//! Euler on the uniform grid `t_k = k/N`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// One training example of the flow objective.
#[derive(Clone, Debug)]
pub struct FlowSample<T> {
    /// Noise, `batch × C_seg × H × W`.
    pub x0: Tensor<T>,
    /// One-hot mask, same shape as `x0`.
    pub x1: Tensor<T>,
    /// Conditioning image, `batch × C_I × H × W`.
    pub image: Tensor<T>,
    /// One time per batch element.
    pub t: Vec<T>,
}

impl<T: Real> FlowSample<T> {
    pub fn validate(&self) -> Result<()> {
        self.x0.expect_same_shape(&self.x1)?;
        let (b, _, h, w) = self.x0.dims4()?;
        let (ib, _, ih, iw) = self.image.dims4()?;
        if (ib, ih, iw) != (b, h, w) {
            return Err(Error::Shape(format!("image {:?} vs mask {:?}", self.image.shape(), self.x0.shape())));
        }
        if self.t.len() != b {
            return Err(Error::Shape(format!("{} times for batch {b}", self.t.len())));
        }
        if let Some(t) = self.t.iter().find(|t| !(**t >= T::zero() && **t <= T::one())) {
            return Err(Error::InvalidArgument(format!("t = {t} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn xt(&self) -> Result<Tensor<T>> {
        interpolate(&self.x0, &self.x1, &self.t)
    }
}

/// A velocity field `v(x, t)`. Conditioning (image, HFE features) is held by the implementor.
pub trait VelocityField<T: Real> {
    fn velocity(&mut self, x: &Tensor<T>, t: T) -> Result<Tensor<T>>;
}

impl<T: Real, F> VelocityField<T> for F
where
    F: FnMut(&Tensor<T>, T) -> Result<Tensor<T>>,
{
    fn velocity(&mut self, x: &Tensor<T>, t: T) -> Result<Tensor<T>> {
        self(x, t)
    }
}

fn per_batch(x: &Tensor<impl Real>, t_len: usize) -> Result<usize> {
    let batch = x.shape().first().copied().unwrap_or(0);
    if batch != t_len {
        return Err(Error::Shape(format!("{t_len} times for batch {batch}")));
    }
    Ok(x.len() / batch.max(1))
}

/// `t·x1 + (1 − t)·x0`, using each batch element's own `t`.
pub fn interpolate<T: Real>(x0: &Tensor<T>, x1: &Tensor<T>, t: &[T]) -> Result<Tensor<T>> {
    x0.expect_same_shape(x1)?;
    let per = per_batch(x0, t.len())?;
    let mut out = Tensor::zeros(x0.shape());
    for (b, &tb) in t.iter().enumerate() {
        let range = b * per..(b + 1) * per;
        for ((o, &a), &c) in out.data_mut()[range.clone()].iter_mut().zip(&x0.data()[range.clone()]).zip(&x1.data()[range]) {
            *o = tb * c + (T::one() - tb) * a;
        }
    }
    Ok(out)
}

/// `x1 − x0`.
pub fn velocity_target<T: Real>(x0: &Tensor<T>, x1: &Tensor<T>) -> Result<Tensor<T>> {
    x1.zip_map(x0, |a, b| a - b)
}

/// Mean over every element of `(pred − (x1 − x0))²`.
pub fn rf_loss<T: Real>(pred: &Tensor<T>, x0: &Tensor<T>, x1: &Tensor<T>) -> Result<f64> {
    pred.expect_same_shape(x0)?;
    x0.expect_same_shape(x1)?;
    if !(pred.all_finite() && x0.all_finite() && x1.all_finite()) {
        return Err(Error::NonFinite("rf_loss input".into()));
    }
    let n = pred.len() as f64;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(x0.data().iter().zip(x1.data()))
        .map(|(&p, (&a, &b))| {
            let d = (p - (b - a)).as_f64();
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// I.i.d. uniform times on `[0, 1]`.
pub fn sample_time<T: Real, R: Rng + ?Sized>(batch: usize, rng: &mut R) -> Vec<T> {
    (0..batch).map(|_| T::from_f64_lossy(rng.random::<f64>())).collect()
}

/// Forward Euler from `t = 0` to `t = 1` in `steps` uniform steps.
pub fn euler_sample<T: Real, V: VelocityField<T> + ?Sized>(
    field: &mut V,
    x0: &Tensor<T>,
    steps: usize,
) -> Result<Tensor<T>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("euler_sample needs at least one step".into()));
    }
    let dt = T::one() / T::from_usize(steps).unwrap();
    let mut x = x0.clone();
    for k in 0..steps {
        let t = T::from_usize(k).unwrap() * dt;
        let v = field.velocity(&x, t)?;
        x.expect_same_shape(&v)?;
        for (xi, &vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += dt * vi;
        }
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("euler state after step {k}")));
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t4(v: Vec<f64>) -> Tensor<f64> {
        let n = v.len();
        Tensor::from_vec(&[1, 1, 1, n], v).unwrap()
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let x0 = t4(vec![-1.0, 2.0]);
        let x1 = t4(vec![3.0, 5.0]);
        assert_eq!(interpolate(&x0, &x1, &[0.0]).unwrap(), x0);
        assert_eq!(interpolate(&x0, &x1, &[1.0]).unwrap(), x1);
        assert_eq!(interpolate(&x0, &x1, &[0.25]).unwrap().data()[0], 0.0);
    }

    #[test]
    fn interpolate_uses_per_element_time() {
        let x0 = Tensor::from_vec(&[2, 1, 1, 1], vec![0.0, 0.0]).unwrap();
        let x1 = Tensor::from_vec(&[2, 1, 1, 1], vec![1.0, 1.0]).unwrap();
        let xt = interpolate(&x0, &x1, &[0.2, 0.7]).unwrap();
        assert_eq!(xt.data(), &[0.2, 0.7]);
        assert!(interpolate(&x0, &x1, &[0.2]).is_err());
    }

    #[test]
    fn velocity_target_examples() {
        let v = velocity_target(&t4(vec![1.5, 0.0, 2.0]), &t4(vec![1.5, 1.0, -1.0])).unwrap();
        assert_eq!(v.data(), &[0.0, 1.0, -3.0]);
        assert!(velocity_target(&t4(vec![1.0]), &t4(vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn rf_loss_examples() {
        let x0 = t4(vec![0.3, -1.0, 2.0, 0.5]);
        let x1 = t4(vec![1.0, 0.0, 0.0, 1.0]);
        let truth = velocity_target(&x0, &x1).unwrap();
        assert_eq!(rf_loss(&truth, &x0, &x1).unwrap(), 0.0);
        let off = truth.map(|v| v + 1.0);
        assert!((rf_loss(&off, &x0, &x1).unwrap() - 1.0).abs() < 1e-15);
        let bad = t4(vec![f64::NAN, 0.0, 0.0, 0.0]);
        assert!(matches!(rf_loss(&bad, &x0, &x1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sample_time_is_seeded() {
        let a: Vec<f64> = sample_time(16, &mut ChaCha8Rng::seed_from_u64(3));
        let b: Vec<f64> = sample_time(16, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.iter().all(|t| (0.0..=1.0).contains(t)));
    }

    #[test]
    fn euler_rejects_zero_steps_and_reports_blowup() {
        let x0 = t4(vec![1.0]);
        let mut f = |x: &Tensor<f64>, _t: f64| Ok(x.map(|v| v * 1e308));
        assert!(euler_sample(&mut f, &x0, 0).is_err());
        let err = euler_sample(&mut f, &x0, 4).unwrap_err().to_string();
        assert!(err.contains("step 1"), "{err}");
    }

    #[test]
    fn flow_sample_validation() {
        let s = FlowSample {
            x0: Tensor::<f64>::zeros(&[2, 3, 4, 4]),
            x1: Tensor::zeros(&[2, 3, 4, 4]),
            image: Tensor::zeros(&[2, 1, 4, 4]),
            t: vec![0.0, 1.0],
        };
        assert!(s.validate().is_ok());
        let bad = FlowSample { t: vec![0.0, 1.5], ..s.clone() };
        assert!(bad.validate().is_err());
        let bad = FlowSample { image: Tensor::zeros(&[2, 1, 4, 5]), ..s };
        assert!(bad.validate().is_err());
    }
}
