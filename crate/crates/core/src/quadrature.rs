//! Symmetric triangle quadrature rules in barycentric coordinates. Weights
//! are normalized to sum to one; multiply by the triangle area.

/// Edge-midpoint rule, exact for degree 2.
pub const DEGREE2: [([f64; 3], f64); 3] = [
    ([0.0, 0.5, 0.5], 1.0 / 3.0),
    ([0.5, 0.0, 0.5], 1.0 / 3.0),
    ([0.5, 0.5, 0.0], 1.0 / 3.0),
];

const A1: f64 = 0.445_948_490_915_964_886_32;
const W1: f64 = 0.223_381_589_678_011_465_70;
const A2: f64 = 0.091_576_213_509_770_743_46;
const W2: f64 = 0.109_951_743_655_321_867_64;

/// Six-point Dunavant rule, exact for degree 4.
pub const DEGREE4: [([f64; 3], f64); 6] = [
    ([1.0 - 2.0 * A1, A1, A1], W1),
    ([A1, 1.0 - 2.0 * A1, A1], W1),
    ([A1, A1, 1.0 - 2.0 * A1], W1),
    ([1.0 - 2.0 * A2, A2, A2], W2),
    ([A2, 1.0 - 2.0 * A2, A2], W2),
    ([A2, A2, 1.0 - 2.0 * A2], W2),
];

/// Value of a P1 function with vertex values `v` at barycentric point `l`.
#[inline]
pub fn p1_at(v: [f64; 3], l: [f64; 3]) -> f64 {
    v[0] * l[0] + v[1] * l[1] + v[2] * l[2]
}
