//! Float helpers routed through libm so the crate stays `no_std`.

#[inline]
pub(crate) fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

/// Round to nearest integer, ties to even (IEEE default rounding).
#[inline]
pub(crate) fn round_half_even(x: f64) -> f64 {
    libm::rint(x)
}
