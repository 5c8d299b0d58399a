//! Two-term generalized Dice loss over probabilities.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { eps: DEFAULT_EPS }
    }
}

impl LossConfig {
    pub fn new(eps: f64) -> Result<Self> {
        if eps > 0.0 && eps.is_finite() {
            Ok(LossConfig { eps })
        } else {
            Err(Error::InvalidConfig(vec![format!("loss eps must be positive, got {eps}")]))
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiceLoss<T: Float> {
    pub value: f64,
    /// Gradient with respect to the probabilities.
    pub grad: Tensor<T>,
}

struct Sums {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
}

fn sums<T: Float>(p: &Tensor<T>, r: &Tensor<T>, eps: f64) -> Result<Sums> {
    p.expect_same_shape(r, "generalized_dice_loss")?;
    let mut s = Sums { a: eps, b: eps, c: eps, d: eps };
    for (&pv, &rv) in p.data().iter().zip(r.data()) {
        let (pv, rv) = (pv.as_f64(), rv.as_f64());
        if !(0.0..=1.0).contains(&pv) {
            return Err(Error::Domain {
                op: "generalized_dice_loss",
                detail: format!("prediction {pv} outside [0, 1]"),
            });
        }
        if rv != 0.0 && rv != 1.0 {
            return Err(Error::Domain {
                op: "generalized_dice_loss",
                detail: format!("reference {rv} is not binary"),
            });
        }
        s.a += pv * rv;
        s.b += pv + rv;
        s.c += (1.0 - pv) * (1.0 - rv);
        s.d += 2.0 - pv - rv;
    }
    Ok(s)
}

/// `1 - (Σpr+ε)/(Σ(p+r)+ε) - (Σ(1-p)(1-r)+ε)/(Σ(2-p-r)+ε)`, pooled over every element.
pub fn dice_loss_value<T: Float>(p: &Tensor<T>, r: &Tensor<T>, eps: f64) -> Result<f64> {
    let s = sums(p, r, eps)?;
    Ok(1.0 - (s.a / s.b + s.c / s.d))
}

pub fn generalized_dice_loss<T: Float>(p: &Tensor<T>, r: &Tensor<T>, eps: f64) -> Result<DiceLoss<T>> {
    let s = sums(p, r, eps)?;
    let value = 1.0 - (s.a / s.b + s.c / s.d);
    let (fa, fc) = (s.a / (s.b * s.b), s.c / (s.d * s.d));
    let grad = r.map(|rv| {
        let rv = rv.as_f64();
        T::of(-(rv / s.b - fa) + ((1.0 - rv) / s.d - fc))
    });
    Ok(DiceLoss { value, grad })
}
