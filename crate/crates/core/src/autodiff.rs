//! Minimal forward-mode automatic differentiation.
//!
//! The kinematic chain and the IK objective are written once, generic over
//! [`Real`], and evaluated either on plain `f64` or on [`Dual`] numbers that
//! carry a gradient with respect to up to `N` seeded variables.

use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Scalar field used by the generic kinematics code.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + std::fmt::Debug
{
    fn cst(x: f64) -> Self;
    fn re(&self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn atan2(self, other: Self) -> Self;

    /// Square root whose derivative is taken as zero at the origin.
    fn safe_sqrt(self) -> Self {
        if self.re() <= 1e-300 {
            Self::cst(0.0)
        } else {
            self.sqrt()
        }
    }

    fn max0(self) -> Self {
        if self.re() > 0.0 {
            self
        } else {
            Self::cst(0.0)
        }
    }

    fn abs(self) -> Self {
        if self.re() < 0.0 {
            -self
        } else {
            self
        }
    }

    fn powi(self, n: u32) -> Self {
        let mut acc = Self::cst(1.0);
        for _ in 0..n {
            acc *= self;
        }
        acc
    }

    fn clamp01(self) -> Self {
        if self.re() < 0.0 {
            Self::cst(0.0)
        } else if self.re() > 1.0 {
            Self::cst(1.0)
        } else {
            self
        }
    }
}

impl Real for f64 {
    #[inline]
    fn cst(x: f64) -> Self {
        x
    }
    #[inline]
    fn re(&self) -> f64 {
        *self
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn atan2(self, other: Self) -> Self {
        f64::atan2(self, other)
    }
}

/// Dual number with an `N`-component gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn constant(v: f64) -> Self {
        Dual { v, d: [0.0; N] }
    }

    /// Independent variable `v` seeded in gradient slot `slot`.
    pub fn variable(v: f64, slot: usize) -> Self {
        let mut d = [0.0; N];
        d[slot] = 1.0;
        Dual { v, d }
    }

    #[inline]
    fn chain(self, v: f64, dv: f64) -> Self {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x *= dv;
        }
        Dual { v, d }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        self.v += rhs.v;
        for i in 0..N {
            self.d[i] += rhs.d[i];
        }
        self
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        self.v -= rhs.v;
        for i in 0..N {
            self.d[i] -= rhs.d[i];
        }
        self
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = self.d[i] * rhs.v + self.v * rhs.d[i];
        }
        Dual {
            v: self.v * rhs.v,
            d,
        }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.v;
        let v = self.v * inv;
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = (self.d[i] - v * rhs.d[i]) * inv;
        }
        Dual { v, d }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(mut self) -> Self {
        self.v = -self.v;
        for x in self.d.iter_mut() {
            *x = -*x;
        }
        self
    }
}

impl<const N: usize> Add<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: f64) -> Self {
        self.v += rhs;
        self
    }
}

impl<const N: usize> Sub<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: f64) -> Self {
        self.v -= rhs;
        self
    }
}

impl<const N: usize> Mul<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(mut self, rhs: f64) -> Self {
        self.v *= rhs;
        for x in self.d.iter_mut() {
            *x *= rhs;
        }
        self
    }
}

impl<const N: usize> Div<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        self * (1.0 / rhs)
    }
}

impl<const N: usize> AddAssign for Dual<N> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<const N: usize> SubAssign for Dual<N> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl<const N: usize> MulAssign for Dual<N> {
    #[inline]
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl<const N: usize> Real for Dual<N> {
    #[inline]
    fn cst(x: f64) -> Self {
        Dual::constant(x)
    }
    #[inline]
    fn re(&self) -> f64 {
        self.v
    }
    #[inline]
    fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }
    #[inline]
    fn cos(self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s)
    }
    fn atan2(self, other: Self) -> Self {
        let (y, x) = (self.v, other.v);
        let r2 = x * x + y * y;
        let mut d = [0.0; N];
        if r2 > 0.0 {
            for i in 0..N {
                d[i] = (x * self.d[i] - y * other.d[i]) / r2;
            }
        }
        Dual {
            v: y.atan2(x),
            d,
        }
    }
}

/// 3-vector over a generic scalar.
#[derive(Clone, Copy, Debug)]
pub struct V3<T>(pub [T; 3]);

impl<T: Real> V3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        V3([x, y, z])
    }

    pub fn cst(v: [f64; 3]) -> Self {
        V3([T::cst(v[0]), T::cst(v[1]), T::cst(v[2])])
    }

    pub fn zero() -> Self {
        V3::cst([0.0; 3])
    }

    pub fn dot(&self, o: &Self) -> T {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    pub fn cross(&self, o: &Self) -> Self {
        let [a, b, c] = self.0;
        let [x, y, z] = o.0;
        V3([b * z - c * y, c * x - a * z, a * y - b * x])
    }

    pub fn norm_sq(&self) -> T {
        self.dot(self)
    }

    pub fn norm(&self) -> T {
        self.norm_sq().safe_sqrt()
    }

    pub fn add(&self, o: &Self) -> Self {
        V3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }

    pub fn sub(&self, o: &Self) -> Self {
        V3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }

    pub fn scale(&self, s: T) -> Self {
        V3([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }

    pub fn re(&self) -> [f64; 3] {
        [self.0[0].re(), self.0[1].re(), self.0[2].re()]
    }
}

/// Row-major 3×3 matrix over a generic scalar.
#[derive(Clone, Copy, Debug)]
pub struct M3<T>(pub [[T; 3]; 3]);

impl<T: Real> M3<T> {
    pub fn identity() -> Self {
        M3::cst([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn cst(m: [[f64; 3]; 3]) -> Self {
        let mut out = [[T::cst(0.0); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = T::cst(m[i][j]);
            }
        }
        M3(out)
    }

    pub fn mul(&self, o: &Self) -> Self {
        let mut out = [[T::cst(0.0); 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = self.0[i][0] * o.0[0][j] + self.0[i][1] * o.0[1][j] + self.0[i][2] * o.0[2][j];
            }
        }
        M3(out)
    }

    pub fn mul_vec(&self, v: &V3<T>) -> V3<T> {
        let r = |i: usize| self.0[i][0] * v.0[0] + self.0[i][1] * v.0[1] + self.0[i][2] * v.0[2];
        V3([r(0), r(1), r(2)])
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        M3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn col(&self, j: usize) -> V3<T> {
        V3([self.0[0][j], self.0[1][j], self.0[2][j]])
    }

    /// Rotation by `angle` about the unit `axis` (Rodrigues).
    pub fn axis_angle(axis: [f64; 3], angle: T) -> Self {
        let (s, c) = (angle.sin(), angle.cos());
        let t = T::cst(1.0) - c;
        let [x, y, z] = axis;
        M3([
            [t * (x * x) + c, t * (x * y) - s * z, t * (x * z) + s * y],
            [t * (x * y) + s * z, t * (y * y) + c, t * (y * z) - s * x],
            [t * (x * z) - s * y, t * (y * z) + s * x, t * (z * z) + c],
        ])
    }

    /// Geodesic angle of this rotation matrix, in `[0, π]`.
    pub fn angle(&self) -> T {
        let m = &self.0;
        let sx = (m[2][1] - m[1][2]) * 0.5;
        let sy = (m[0][2] - m[2][0]) * 0.5;
        let sz = (m[1][0] - m[0][1]) * 0.5;
        let sin = V3([sx, sy, sz]).norm();
        let cos = (m[0][0] + m[1][1] + m[2][2] - 1.0) * 0.5;
        sin.atan2(cos)
    }

    pub fn re(&self) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = self.0[i][j].re();
            }
        }
        out
    }
}

/// Determinant of a small dense square matrix by partial-pivot elimination.
pub fn det<T: Real, const K: usize>(mut a: [[T; K]; K]) -> T {
    let mut det = T::cst(1.0);
    for c in 0..K {
        let mut piv = c;
        for r in c + 1..K {
            if a[r][c].re().abs() > a[piv][c].re().abs() {
                piv = r;
            }
        }
        if a[piv][c].re() == 0.0 {
            return T::cst(0.0);
        }
        if piv != c {
            a.swap(piv, c);
            det = -det;
        }
        let p = a[c][c];
        det *= p;
        for r in c + 1..K {
            let f = a[r][c] / p;
            for k in c..K {
                let v = a[c][k];
                a[r][k] -= f * v;
            }
        }
    }
    det
}
