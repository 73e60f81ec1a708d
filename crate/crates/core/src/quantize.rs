//! Low-bitwidth gradient quantization and packed gradient/hessian pairs.
//!
//! Gradients are mapped onto `2^B − 1` signed integer levels and hessians onto
//! `2^B − 1` unsigned levels, using one scale per boosting iteration computed
//! over every training row. Codes are then packed two-per-integer (gradient in
//! the signed upper half, hessian or count in the lower half) so that a single
//! integer addition accumulates both statistics.

use std::fmt::Debug;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::GradientBuffer;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 5;

/// Rows per independently seeded block of SR draws.
const DRAW_BLOCK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    #[default]
    Stochastic,
    Nearest,
}

impl Rounding {
    pub fn name(self) -> &'static str {
        match self {
            Rounding::Stochastic => "sr",
            Rounding::Nearest => "rn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sr" | "stochastic" => Some(Rounding::Stochastic),
            "rn" | "nearest" => Some(Rounding::Nearest),
            _ => None,
        }
    }
}

/// Round to nearest; `x.5` goes up (so `-0.5` becomes `0`).
pub fn round_nearest(x: f64) -> i64 {
    let floor = x.floor();
    if x < floor + 0.5 {
        floor as i64
    } else {
        x.ceil() as i64
    }
}

/// Stochastic rounding driven by a uniform draw in `[0, 1)`: rounds up with
/// probability `x − ⌊x⌋`.
pub fn round_stochastic(x: f64, draw: f64) -> i64 {
    let floor = x.floor();
    if x == floor {
        return floor as i64;
    }
    if draw >= (floor + 1.0) - x {
        floor as i64 + 1
    } else {
        floor as i64
    }
}

pub fn round(x: f64, mode: Rounding, draw: f64) -> i64 {
    match mode {
        Rounding::Nearest => round_nearest(x),
        Rounding::Stochastic => round_stochastic(x, draw),
    }
}

/// Largest gradient code magnitude for `bits`.
pub fn max_grad_code(bits: u8) -> i64 {
    (1i64 << (bits - 1)) - 1
}

/// Largest hessian code for `bits`.
pub fn max_hess_code(bits: u8) -> u64 {
    (1u64 << bits) - 2
}

/// Stateless uniform draws addressed by `(seed, stream, index)`.
///
/// A draw depends only on its address, never on how rows are chunked across
/// threads or workers, so SR results are identical for any partitioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    seed: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Stream used for gradient draws of one boosting iteration.
    pub fn grad_stream(iteration: u64) -> u64 {
        iteration << 1
    }

    pub fn hess_stream(iteration: u64) -> u64 {
        (iteration << 1) | 1
    }

    fn positioned(&self, stream: u64, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        // Each f64 draw consumes one u64, i.e. two 32-bit words.
        rng.set_word_pos(2 * index as u128);
        rng
    }

    pub fn uniform(&self, stream: u64, index: usize) -> f64 {
        self.positioned(stream, index).random::<f64>()
    }

    /// Fills `out` with the draws at indices `start..start + out.len()`.
    pub fn fill(&self, stream: u64, start: usize, out: &mut [f64]) {
        let mut rng = self.positioned(stream, start);
        for d in out {
            *d = rng.random::<f64>();
        }
    }
}

/// Per-iteration quantization intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantScales {
    pub bits: u8,
    /// Gradient interval length; 0 when every gradient is 0.
    pub grad_scale: f64,
    /// Hessian interval length; unused (0) when the hessian is constant.
    pub hess_scale: f64,
    pub constant_hessian: Option<f64>,
}

pub fn check_bits(bits: u8) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "gradient bits must be in [{MIN_BITS}, {MAX_BITS}], got {bits}"
        )))
    }
}

pub fn compute_scales(grads: &GradientBuffer, bits: u8) -> Result<QuantScales> {
    check_bits(bits)?;
    if grads.is_empty() {
        return Err(Error::EmptyData("no gradients to quantize".into()));
    }
    let grad_scale = grads.max_abs_grad() / max_grad_code(bits) as f64;
    let hess_scale = match grads.constant_hessian {
        Some(_) => 0.0,
        None => grads.max_hess() / max_hess_code(bits) as f64,
    };
    Ok(QuantScales {
        bits,
        grad_scale,
        hess_scale,
        constant_hessian: grads.constant_hessian,
    })
}

/// Integer codes for one iteration's gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGradients {
    pub grad: Vec<i8>,
    /// Absent when the hessian is constant.
    pub hess: Option<Vec<u8>>,
    pub scales: QuantScales,
}

impl QuantizedGradients {
    pub fn len(&self) -> usize {
        self.grad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grad.is_empty()
    }

    /// Hessian code of a row, or 1 (a row count) for constant hessians.
    pub fn hess_code(&self, row: usize) -> u64 {
        self.hess.as_ref().map_or(1, |h| u64::from(h[row]))
    }

    /// Real-valued gradient sum represented by an integer code sum.
    pub fn real_grad(&self, code_sum: i64) -> f64 {
        code_sum as f64 * self.scales.grad_scale
    }

    /// Real-valued hessian sum represented by an integer code sum (or count).
    pub fn real_hess(&self, code_sum: u64) -> f64 {
        match self.scales.constant_hessian {
            Some(h) => code_sum as f64 * h,
            None => code_sum as f64 * self.scales.hess_scale,
        }
    }
}

fn quantize_values<T: Copy + Send>(
    values: &[f64],
    scale: f64,
    limit: (i64, i64),
    mode: Rounding,
    rng: &CounterRng,
    stream: u64,
    convert: impl Fn(i64) -> T + Sync,
) -> Vec<T> {
    let zero = convert(0);
    let mut out = vec![zero; values.len()];
    if scale == 0.0 {
        return out;
    }
    let inv = 1.0 / scale;
    out.par_chunks_mut(DRAW_BLOCK)
        .zip(values.par_chunks(DRAW_BLOCK))
        .enumerate()
        .for_each(|(block, (out, values))| {
            let mut draws = [0.0f64; DRAW_BLOCK];
            let draws = &mut draws[..values.len()];
            if mode == Rounding::Stochastic {
                rng.fill(stream, block * DRAW_BLOCK, draws);
            }
            for ((o, &v), &d) in out.iter_mut().zip(values).zip(draws.iter()) {
                // Dividing the extreme value by its own scale can land a ulp
                // past the top level; clamp back into range.
                *o = convert(round(v * inv, mode, d).clamp(limit.0, limit.1));
            }
        });
    out
}

/// Quantizes every row with the configured rounding. SR draws come from
/// `rng` at `(iteration, row)` so the result is independent of parallelism.
pub fn quantize_gradients(
    grads: &GradientBuffer,
    scales: &QuantScales,
    mode: Rounding,
    rng: &CounterRng,
    iteration: u64,
) -> QuantizedGradients {
    let gmax = max_grad_code(scales.bits);
    let grad = quantize_values(
        &grads.grad,
        scales.grad_scale,
        (-gmax, gmax),
        mode,
        rng,
        CounterRng::grad_stream(iteration),
        |c| c as i8,
    );
    let hess = scales.constant_hessian.is_none().then(|| {
        quantize_values(
            &grads.hess,
            scales.hess_scale,
            (0, max_hess_code(scales.bits) as i64),
            mode,
            rng,
            CounterRng::hess_stream(iteration),
            |c| c as u8,
        )
    });
    QuantizedGradients {
        grad,
        hess,
        scales: *scales,
    }
}

/// Width of each half of a packed pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HalfWidth {
    W8,
    W16,
    W32,
}

impl HalfWidth {
    pub fn bits(self) -> u32 {
        match self {
            HalfWidth::W8 => 8,
            HalfWidth::W16 => 16,
            HalfWidth::W32 => 32,
        }
    }

    /// Bytes of one packed bin (both halves).
    pub fn bin_bytes(self) -> usize {
        2 * self.bits() as usize / 8
    }

    pub fn max_signed(self) -> i64 {
        (1i64 << (self.bits() - 1)) - 1
    }

    pub fn max_unsigned(self) -> u64 {
        (1u64 << self.bits()) - 1
    }

    pub fn fits(self, grad: i64, hess: u64) -> bool {
        grad >= -self.max_signed() - 1 && grad <= self.max_signed() && hess <= self.max_unsigned()
    }
}

#[inline(always)]
fn pack_bits(grad: i64, hess: u64, half: u32) -> u64 {
    let mask = if half == 32 {
        u32::MAX as u64
    } else {
        (1u64 << half) - 1
    };
    (((grad as u64) & mask) << half) | hess
}

#[inline(always)]
fn unpack_bits(bits: u64, half: u32) -> (i64, u64) {
    let mask = if half == 32 {
        u32::MAX as u64
    } else {
        (1u64 << half) - 1
    };
    let hess = bits & mask;
    let upper = (bits >> half) & mask;
    // Sign-extend the upper half.
    let shift = 64 - half;
    let grad = ((upper << shift) as i64) >> shift;
    (grad, hess)
}

/// A gradient/hessian pair packed into one `2W`-bit integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PackedPair {
    bits: u64,
    width: HalfWidth,
}

impl PackedPair {
    pub fn pack(grad: i64, hess: u64, width: HalfWidth) -> Result<Self> {
        if !width.fits(grad, hess) {
            return Err(Error::InvalidInput(format!(
                "({grad}, {hess}) does not fit {}-bit halves",
                width.bits()
            )));
        }
        Ok(Self {
            bits: pack_bits(grad, hess, width.bits()),
            width,
        })
    }

    pub fn from_bits(bits: u64, width: HalfWidth) -> Self {
        let total = 2 * width.bits();
        let bits = if total == 64 {
            bits
        } else {
            bits & ((1u64 << total) - 1)
        };
        Self { bits, width }
    }

    pub fn bits(self) -> u64 {
        self.bits
    }

    pub fn width(self) -> HalfWidth {
        self.width
    }

    pub fn unpack(self) -> (i64, u64) {
        unpack_bits(self.bits, self.width.bits())
    }

    /// Modular addition of the whole `2W`-bit word.
    pub fn wrapping_add(self, other: Self) -> Self {
        assert_eq!(self.width, other.width, "mixed packed widths");
        Self::from_bits(self.bits.wrapping_add(other.bits), self.width)
    }
}

/// Integer word holding a packed pair, used directly in histogram bins.
pub trait PackedWord: Copy + Default + Eq + Debug + Send + Sync + 'static {
    const WIDTH: HalfWidth;

    fn from_codes(grad: i64, hess: u64) -> Self;
    fn unpack(self) -> (i64, u64);
    fn add(self, other: Self) -> Self;
    fn sub(self, other: Self) -> Self;
}

macro_rules! packed_word {
    ($ty:ty, $width:expr) => {
        impl PackedWord for $ty {
            const WIDTH: HalfWidth = $width;

            #[inline(always)]
            fn from_codes(grad: i64, hess: u64) -> Self {
                debug_assert!($width.fits(grad, hess), "({grad}, {hess}) overflows {:?}", $width);
                pack_bits(grad, hess, $width.bits()) as $ty
            }

            #[inline(always)]
            fn unpack(self) -> (i64, u64) {
                unpack_bits(self as u64, $width.bits())
            }

            #[inline(always)]
            fn add(self, other: Self) -> Self {
                self.wrapping_add(other)
            }

            #[inline(always)]
            fn sub(self, other: Self) -> Self {
                self.wrapping_sub(other)
            }
        }
    };
}

packed_word!(u16, HalfWidth::W8);
packed_word!(u32, HalfWidth::W16);
packed_word!(u64, HalfWidth::W32);

#[cfg(test)]
mod tests {
    use rand::rngs::StdRng;

    use super::*;

    fn buffer(grad: Vec<f64>, hess: Option<Vec<f64>>) -> GradientBuffer {
        let constant = hess.is_none().then_some(1.0);
        let hess = hess.unwrap_or_else(|| vec![1.0; grad.len()]);
        GradientBuffer {
            grad,
            hess,
            constant_hessian: constant,
        }
    }

    #[test]
    fn scales() {
        let s = compute_scales(&buffer(vec![-0.9, 0.3, 0.6], None), 3).unwrap();
        assert!((s.grad_scale - 0.3).abs() < 1e-15);
        assert_eq!(s.hess_scale, 0.0);

        let s = compute_scales(&buffer(vec![0.1, 0.2], Some(vec![0.25, 0.1])), 2).unwrap();
        assert_eq!(s.hess_scale, 0.125);

        let g = buffer(vec![0.0, 0.0], None);
        let s = compute_scales(&g, 3).unwrap();
        assert_eq!(s.grad_scale, 0.0);
        let q = quantize_gradients(&g, &s, Rounding::Stochastic, &CounterRng::new(1), 0);
        assert_eq!(q.grad, vec![0, 0]);

        assert!(compute_scales(&g, 1).is_err());
        assert!(compute_scales(&g, 6).is_err());
    }

    #[test]
    fn nearest_rounding() {
        assert_eq!(round_nearest(0.49), 0);
        assert_eq!(round_nearest(0.5), 1);
        assert_eq!(round_nearest(-0.5), 0);
        assert_eq!(round_nearest(-0.51), -1);
        assert_eq!(round_nearest(1.5), 2);
    }

    #[test]
    fn stochastic_rounding_thresholds() {
        assert_eq!(round_stochastic(0.25, 0.0), 0);
        assert_eq!(round_stochastic(0.25, 0.7499), 0);
        assert_eq!(round_stochastic(0.25, 0.75), 1);
        assert_eq!(round_stochastic(0.25, 0.9999), 1);
        for d in [0.0, 0.3, 0.999_999] {
            assert_eq!(round_stochastic(3.0, d), 3);
            assert_eq!(round_stochastic(-2.0, d), -2);
        }
        assert_eq!(round_stochastic(-0.25, 0.2), -1);
        assert_eq!(round_stochastic(-0.25, 0.25), 0);
    }

    #[test]
    fn stochastic_rounding_mean() {
        let rng = CounterRng::new(7);
        let mut draws = vec![0.0; 100_000];
        rng.fill(0, 0, &mut draws);
        let mean = draws.iter().map(|&d| round_stochastic(0.3, d) as f64).sum::<f64>() / 1e5;
        assert!((mean - 0.3).abs() < 0.005, "{mean}");
    }

    #[test]
    fn extreme_values_map_to_top_level() {
        let g = buffer(vec![0.9, -0.9, 0.45], None);
        let s = compute_scales(&g, 3).unwrap();
        for mode in [Rounding::Nearest, Rounding::Stochastic] {
            let q = quantize_gradients(&g, &s, mode, &CounterRng::new(3), 0);
            assert_eq!(q.grad[..2], [3, -3]);
            assert!(q.grad[2] == 1 || q.grad[2] == 2);
        }
        let q = quantize_gradients(&g, &s, Rounding::Nearest, &CounterRng::new(3), 0);
        assert_eq!(q.grad[2], 2);
    }

    #[test]
    fn sr_tie_is_fair_coin() {
        let rng = CounterRng::new(11);
        let g = buffer(vec![0.9, 0.45], None);
        let s = compute_scales(&g, 3).unwrap();
        let ups = (0..4000u64)
            .filter(|&it| quantize_gradients(&g, &s, Rounding::Stochastic, &rng, it).grad[1] == 2)
            .count();
        // Binomial(4000, 0.5): sd ≈ 31.6.
        assert!((ups as i64 - 2000).abs() < 130, "{ups}");
    }

    #[test]
    fn draws_do_not_depend_on_chunking() {
        let rng = CounterRng::new(99);
        let mut whole = vec![0.0; 10_000];
        rng.fill(5, 0, &mut whole);
        for (start, len) in [(0, 1), (1, 3), (4095, 2), (5000, 777), (9999, 1)] {
            let mut part = vec![0.0; len];
            rng.fill(5, start, &mut part);
            assert_eq!(part, whole[start..start + len]);
        }
        assert_eq!(rng.uniform(5, 1234), whole[1234]);
        let mut other = vec![0.0; 16];
        rng.fill(6, 0, &mut other);
        assert_ne!(other, whole[..16]);
    }

    #[test]
    fn hessian_codes() {
        let g = buffer(vec![0.5, -0.5, 0.1], Some(vec![0.25, 0.0, 0.1]));
        let s = compute_scales(&g, 2).unwrap();
        let q = quantize_gradients(&g, &s, Rounding::Nearest, &CounterRng::new(0), 0);
        assert_eq!(q.hess.as_deref(), Some(&[2u8, 0, 1][..]));
        assert_eq!(q.hess_code(0), 2);
    }

    #[test]
    fn pack_examples() {
        let p = PackedPair::pack(-1, 2, HalfWidth::W16).unwrap();
        assert_eq!(p.bits(), 0xFFFF_0002);
        assert_eq!(PackedPair::from_bits(0xFFFF_0002, HalfWidth::W16).unpack(), (-1, 2));
        for w in [HalfWidth::W8, HalfWidth::W16, HalfWidth::W32] {
            assert_eq!(PackedPair::pack(0, 0, w).unwrap().bits(), 0);
            assert_eq!(PackedPair::from_bits(0, w).unpack(), (0, 0));
        }
        assert!(PackedPair::pack(128, 0, HalfWidth::W8).is_err());
        assert!(PackedPair::pack(-129, 0, HalfWidth::W8).is_err());
        assert!(PackedPair::pack(0, 256, HalfWidth::W8).is_err());
        assert!(PackedPair::pack(-128, 255, HalfWidth::W8).is_ok());
        assert_eq!(u32::from_codes(-1, 2), 0xFFFF_0002);
        assert_eq!(u64::from_codes(i32::MIN as i64, 7).unpack(), (i32::MIN as i64, 7));
    }

    #[test]
    fn packed_addition_is_pairwise() {
        let mut rng = StdRng::seed_from_u64(42);
        for width in [HalfWidth::W8, HalfWidth::W16, HalfWidth::W32] {
            let gmax = width.max_signed();
            let hmax = width.max_unsigned();
            let mut checked = 0;
            while checked < 1000 {
                let a = rng.random_range(-gmax - 1..=gmax);
                let c = rng.random_range(-gmax - 1..=gmax);
                let b = rng.random_range(0..=hmax);
                let d = rng.random_range(0..=hmax);
                if !width.fits(a + c, b + d) {
                    continue;
                }
                let lhs = PackedPair::pack(a, b, width)
                    .unwrap()
                    .wrapping_add(PackedPair::pack(c, d, width).unwrap());
                assert_eq!(lhs, PackedPair::pack(a + c, b + d, width).unwrap());
                checked += 1;
            }
        }
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #[test]
            fn pack_round_trip(g in i32::MIN as i64..=i32::MAX as i64, h in 0u64..=u32::MAX as u64) {
                for w in [HalfWidth::W8, HalfWidth::W16, HalfWidth::W32] {
                    if w.fits(g, h) {
                        prop_assert_eq!(PackedPair::pack(g, h, w).unwrap().unpack(), (g, h));
                    }
                }
                prop_assert_eq!(u64::from_codes(g, h).unpack(), (g, h));
            }

            #[test]
            fn codes_stay_in_range(
                grad in prop::collection::vec(-1e3f64..1e3, 1..64),
                hess in prop::collection::vec(0f64..10.0, 64),
                bits in 2u8..=5,
                seed in any::<u64>(),
                nearest in any::<bool>(),
            ) {
                let n = grad.len();
                let g = buffer(grad, Some(hess[..n].to_vec()));
                let s = compute_scales(&g, bits).unwrap();
                let mode = if nearest { Rounding::Nearest } else { Rounding::Stochastic };
                let q = quantize_gradients(&g, &s, mode, &CounterRng::new(seed), 0);
                let gmax = max_grad_code(bits);
                prop_assert!(q.grad.iter().all(|&c| i64::from(c).abs() <= gmax));
                prop_assert!(q.hess.unwrap().iter().all(|&c| u64::from(c) <= max_hess_code(bits)));
            }
        }
    }
}
