use crate::error::{HteError, Result};
use crate::scalar::Real;

/// `Cov(|W|, |Z|)` for standard normals `W`, `Z` with correlation `rho`:
/// `(2/pi) (sqrt(1 - rho^2) + rho asin(rho) - 1)`.
///
/// Even in `rho`, zero at `rho = 0`, and `1 - 2/pi` at `|rho| = 1`.
pub fn gaussian_abs_cov<T: Real>(rho: T) -> Result<T> {
    let tol = T::lit(1e-12);
    if !(rho.abs() <= T::one() + tol) {
        return Err(HteError::Domain(format!("correlation {rho} outside [-1, 1]")));
    }
    Ok(gaussian_abs_cov_unchecked(rho.max(-T::one()).min(T::one())))
}

#[inline]
pub(crate) fn gaussian_abs_cov_unchecked<T: Real>(rho: T) -> T {
    let r = rho.abs();
    let v = T::lit(std::f64::consts::FRAC_2_PI) * ((T::one() - r * r).max(T::zero()).sqrt() + r * r.asin() - T::one());
    // the closed form is nonnegative; rounding near rho = 0 can dip below
    v.max(T::zero())
}
