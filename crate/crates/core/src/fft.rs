//! Iterative radix-2 complex FFT and its 2-D extension.

use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub const ZERO: Complex = Complex { re: 0.0, im: 0.0 };

    pub fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    pub fn conj(self) -> Self {
        Self::new(self.re, -self.im)
    }

    fn mul(self, o: Complex) -> Complex {
        Complex::new(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)
    }

    fn add(self, o: Complex) -> Complex {
        Complex::new(self.re + o.re, self.im + o.im)
    }

    fn sub(self, o: Complex) -> Complex {
        Complex::new(self.re - o.re, self.im - o.im)
    }
}

/// Direction of the transform. Neither direction normalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `X[k] = Σ x[n] e^{-2πi kn/N}`
    Forward,
    /// `x[n] = Σ X[k] e^{+2πi kn/N}`
    Inverse,
}

/// In-place transform; `data.len()` must be a power of two.
pub fn fft_in_place(data: &mut [Complex], dir: Direction) {
    let n = data.len();
    assert!(n.is_power_of_two(), "radix-2 FFT needs a power-of-two length, got {n}");
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            data.swap(i, j);
        }
    }
    let sign = match dir {
        Direction::Forward => -1.0,
        Direction::Inverse => 1.0,
    };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        for k in 0..half {
            let angle = sign * 2.0 * PI * k as f64 / len as f64;
            let w = Complex::new(angle.cos(), angle.sin());
            let mut start = 0;
            while start < n {
                let a = data[start + k];
                let b = data[start + k + half].mul(w);
                data[start + k] = a.add(b);
                data[start + k + half] = a.sub(b);
                start += len;
            }
        }
        len *= 2;
    }
}

/// 2-D transform of a row-major `height x width` grid.
pub fn fft2_in_place(data: &mut [Complex], height: usize, width: usize, dir: Direction) {
    assert_eq!(data.len(), height * width);
    for row in data.chunks_mut(width) {
        fft_in_place(row, dir);
    }
    let mut column = vec![Complex::ZERO; height];
    for x in 0..width {
        for y in 0..height {
            column[y] = data[y * width + x];
        }
        fft_in_place(&mut column, dir);
        for y in 0..height {
            data[y * width + x] = column[y];
        }
    }
}
