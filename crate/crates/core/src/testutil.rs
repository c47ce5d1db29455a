//! Helpers shared by unit tests.

use std::cell::Cell;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Matrix, Real};

pub fn normal_matrix<T: Real>(rows: usize, cols: usize, seed: u64) -> Matrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| {
        let v: f64 = StandardNormal.sample(&mut rng);
        T::from_f64(v)
    })
}

thread_local! {
    static MULS: Cell<u64> = const { Cell::new(0) };
}

/// `f64` wrapper that counts every multiplication on the current thread.
#[derive(Debug, Clone, Copy, Default, PartialEq, PartialOrd)]
pub struct Counted(pub f64);

impl Counted {
    pub fn reset() {
        MULS.with(|m| m.set(0));
    }

    pub fn muls() -> u64 {
        MULS.with(|m| m.get())
    }
}

impl Add for Counted {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Counted(self.0 + o.0)
    }
}

impl Sub for Counted {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Counted(self.0 - o.0)
    }
}

impl Mul for Counted {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        MULS.with(|m| m.set(m.get() + 1));
        Counted(self.0 * o.0)
    }
}

impl Div for Counted {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        Counted(self.0 / o.0)
    }
}

impl Neg for Counted {
    type Output = Self;
    fn neg(self) -> Self {
        Counted(-self.0)
    }
}

impl AddAssign for Counted {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl SubAssign for Counted {
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl MulAssign for Counted {
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl Sum for Counted {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Counted(0.0), |a, b| a + b)
    }
}

impl Real for Counted {
    fn zero() -> Self {
        Counted(0.0)
    }
    fn one() -> Self {
        Counted(1.0)
    }
    fn from_f64(v: f64) -> Self {
        Counted(v)
    }
    fn to_f64(self) -> f64 {
        self.0
    }
    fn exp(self) -> Self {
        Counted(self.0.exp())
    }
    fn ln(self) -> Self {
        Counted(self.0.ln())
    }
    fn sqrt(self) -> Self {
        Counted(self.0.sqrt())
    }
    fn abs(self) -> Self {
        Counted(self.0.abs())
    }
    fn is_finite(self) -> bool {
        self.0.is_finite()
    }
}
