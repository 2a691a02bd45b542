//! Float helpers backed by `libm` so results do not depend on the platform libm.

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[inline]
pub fn pow10(e: f64) -> f64 {
    libm::pow(10.0, e)
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, &x| if abs(x) > m { abs(x) } else { m })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    sqrt(dot(a, a))
}

/// Mean of a set of equal-length vectors, computed as `first + mean(v - first)`.
///
/// When every input is bit-identical the result is bit-identical to the
/// inputs, which keeps symmetric runs exactly symmetric on any topology.
pub fn anchored_mean_into<'a, I>(out: &mut [f64], mut vectors: I)
where
    I: ExactSizeIterator<Item = &'a [f64]>,
{
    let count = vectors.len();
    assert!(count > 0, "mean of an empty set");
    let anchor = vectors.next().expect("nonempty");
    out.iter_mut().for_each(|o| *o = 0.0);
    for v in vectors {
        for ((o, &x), &a) in out.iter_mut().zip(v).zip(anchor) {
            *o += x - a;
        }
    }
    let k = count as f64;
    for (o, &a) in out.iter_mut().zip(anchor) {
        *o = a + *o / k;
    }
}
