use std::f64::consts::{FRAC_PI_2, PI};

use super::{sabine_absorption, schroeder::fit_edc_t60, Rir, RoomSpec, SPEED_OF_SOUND};
use crate::error::{invalid, Result};

/// RIR length as a multiple of the nominal T60.
const LENGTH_FACTOR: f64 = 1.2;
/// Image paths whose wall attenuation exceeds this are dropped.
const ORDER_FLOOR_DB: f64 = 60.0;
/// Cut-off of the Allen-Berkley DC-removal filter.
const HIGHPASS_HZ: f64 = 100.0;
/// Quadrature points per axis over one octant of directions.
const MODEL_QUAD: usize = 16;

/// How the uniform wall reflection coefficient is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reflection {
    /// Fit to an analytic directional decay model so the Schroeder T60 of
    /// the simulated response matches the nominal value.
    Calibrated,
    /// `sqrt(1 - alpha)` with the Sabine absorption.
    Sabine,
    /// Explicit coefficient in `[0, 1)`.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RirOptions {
    pub max_order: Option<u32>,
    pub reflection: Reflection,
    pub highpass: bool,
}

impl Default for RirOptions {
    fn default() -> Self {
        Self {
            max_order: None,
            reflection: Reflection::Calibrated,
            highpass: true,
        }
    }
}

/// Number of samples simulated for a nominal T60.
pub fn rir_len(room: &RoomSpec, t60: f64, fs: u32) -> usize {
    let fsf = fs as f64;
    let direct_tap = (fsf * room.distance() / SPEED_OF_SOUND).round() as usize;
    ((LENGTH_FACTOR * t60 * fsf).ceil() as usize).max(direct_tap + 1)
}

/// Smallest reflection order whose wall attenuation alone reaches 60 dB.
pub fn default_max_order(beta: f64) -> u32 {
    if beta <= 0.0 {
        return 0;
    }
    if beta >= 1.0 {
        return u32::MAX;
    }
    let floor = 10f64.powf(-ORDER_FLOOR_DB / 20.0);
    (floor.ln() / beta.ln()).ceil().max(0.0) as u32
}

/// Image-source simulation of a shoebox room with uniform wall absorption.
pub fn simulate_rir(room: &RoomSpec, t60: f64, fs: u32, max_order: Option<u32>) -> Result<Rir> {
    simulate_rir_with(
        room,
        t60,
        fs,
        &RirOptions {
            max_order,
            ..RirOptions::default()
        },
    )
}

/// Every image up to the maximum order contributes `beta^order / (4 pi d)`
/// at the tap nearest to `d / c * fs`.
pub fn simulate_rir_with(room: &RoomSpec, t60: f64, fs: u32, opts: &RirOptions) -> Result<Rir> {
    room.validate()?;
    if fs == 0 {
        return Err(invalid("sample rate must be positive"));
    }
    let alpha = sabine_absorption(room, t60)?;
    let beta = match opts.reflection {
        Reflection::Calibrated => calibrate_reflection(room, t60, fs)?,
        Reflection::Sabine => (1.0 - alpha).sqrt(),
        Reflection::Fixed(b) if (0.0..1.0).contains(&b) => b,
        Reflection::Fixed(b) => return Err(invalid(format!("reflection coefficient {b} outside [0, 1)"))),
    };
    let max_order = opts.max_order.unwrap_or_else(|| default_max_order(beta));
    let mut taps = image_sources(room, fs, rir_len(room, t60, fs), beta, max_order);
    if opts.highpass {
        highpass(&mut taps, fs as f64);
    }
    Rir::new(taps, fs, t60)
}

fn image_sources(room: &RoomSpec, fs: u32, len: usize, beta: f64, max_order: u32) -> Vec<f64> {
    let fsf = fs as f64;
    let max_dist = (len as f64 - 0.5) * SPEED_OF_SOUND / fsf;
    let beta_pow: Vec<f64> = (0..=max_order.min(100_000)).map(|k| beta.powi(k as i32)).collect();
    let max_order = (beta_pow.len() - 1) as u64;
    let [lx, ly, lz] = room.dims;
    let [sx, sy, sz] = room.source_pos;
    let mic = room.mic_pos;
    let bound = |l: f64| -> i64 { ((max_dist / (2.0 * l)).ceil() as i64 + 1).min(max_order as i64 + 1) };
    let (nx_max, ny_max, nz_max) = (bound(lx), bound(ly), bound(lz));

    let mut taps = vec![0.0; len];
    for nx in -nx_max..=nx_max {
        for px in 0..2i64 {
            let ox = (nx - px).unsigned_abs() + nx.unsigned_abs();
            if ox > max_order {
                continue;
            }
            let dx = (1 - 2 * px) as f64 * sx + 2.0 * nx as f64 * lx - mic[0];
            if dx.abs() > max_dist {
                continue;
            }
            for ny in -ny_max..=ny_max {
                for py in 0..2i64 {
                    let oy = ox + (ny - py).unsigned_abs() + ny.unsigned_abs();
                    if oy > max_order {
                        continue;
                    }
                    let dy = (1 - 2 * py) as f64 * sy + 2.0 * ny as f64 * ly - mic[1];
                    let dxy2 = dx * dx + dy * dy;
                    if dxy2 > max_dist * max_dist {
                        continue;
                    }
                    for nz in -nz_max..=nz_max {
                        for pz in 0..2i64 {
                            let order = oy + (nz - pz).unsigned_abs() + nz.unsigned_abs();
                            if order > max_order {
                                continue;
                            }
                            let dz = (1 - 2 * pz) as f64 * sz + 2.0 * nz as f64 * lz - mic[2];
                            let d = (dxy2 + dz * dz).sqrt();
                            let tap = (fsf * d / SPEED_OF_SOUND).round() as usize;
                            if tap < len {
                                taps[tap] += beta_pow[order as usize] / (4.0 * PI * d);
                            }
                        }
                    }
                }
            }
        }
    }
    taps
}

/// Allen-Berkley second-order high-pass at 100 Hz, applied in place.
fn highpass(taps: &mut [f64], fs: f64) {
    let w = 2.0 * PI * HIGHPASS_HZ / fs;
    let r1 = (-w).exp();
    let b1 = 2.0 * r1 * w.cos();
    let b2 = -r1 * r1;
    let a1 = -(1.0 + r1);
    let mut y = [0.0; 3];
    for v in taps.iter_mut() {
        y[2] = y[1];
        y[1] = y[0];
        y[0] = b1 * y[1] + b2 * y[2] + *v;
        *v = y[0] + a1 * y[1] + r1 * y[2];
    }
}

/// Schroeder T60 of the expected energy envelope for reflection
/// coefficient `beta`.
///
/// An image at distance `r` in direction `u` has undergone about
/// `r * sum_i |u_i| / L_i` reflections and images fill space with density
/// `1 / V`, so the reverberant energy per tap is the direction average of
/// `beta^(2 c t k(u))` scaled by `c / (4 pi V fs)`. The direct path adds
/// `1 / (4 pi d)^2` at its tap.
pub fn model_t60(room: &RoomSpec, t60: f64, fs: u32, beta: f64) -> Result<f64> {
    let fsf = fs as f64;
    let d0 = room.distance();
    let n0 = (fsf * d0 / SPEED_OF_SOUND).round() as usize;
    let len = rir_len(room, t60, fs);
    let a = -2.0 * beta.ln();
    let [lx, ly, lz] = room.dims;

    let mut decay = Vec::with_capacity(MODEL_QUAD * MODEL_QUAD);
    for i in 0..MODEL_QUAD {
        let z = (i as f64 + 0.5) / MODEL_QUAD as f64;
        let r = (1.0 - z * z).sqrt();
        for j in 0..MODEL_QUAD {
            let phi = (j as f64 + 0.5) / MODEL_QUAD as f64 * FRAC_PI_2;
            let k = r * phi.cos() / lx + r * phi.sin() / ly + z / lz;
            decay.push((-a * SPEED_OF_SOUND * k / fsf).exp());
        }
    }
    let scale = SPEED_OF_SOUND / (4.0 * PI * room.volume() * fsf) / decay.len() as f64;
    let mut level: Vec<f64> = decay.iter().map(|q| q.powi(n0 as i32)).collect();
    let mut energy = vec![0.0; len];
    for e in energy.iter_mut().skip(n0) {
        let mut s = 0.0;
        for (l, q) in level.iter_mut().zip(&decay) {
            s += *l;
            *l *= q;
        }
        *e = s * scale;
    }
    energy[n0] += 1.0 / (16.0 * PI * PI * d0 * d0);

    let mut acc = 0.0;
    for e in energy.iter_mut().rev() {
        acc += *e;
        *e = acc;
    }
    energy.iter_mut().for_each(|e| *e /= acc);
    fit_edc_t60(&energy, fsf)
}

/// Reflection coefficient whose modelled T60 equals `t60`, by bisection on
/// the log energy attenuation per reflection.
pub fn calibrate_reflection(room: &RoomSpec, t60: f64, fs: u32) -> Result<f64> {
    sabine_absorption(room, t60)?;
    let (mut lo, mut hi) = (1e-5f64, 30.0f64);
    for _ in 0..48 {
        let mid = (lo * hi).sqrt();
        // Too little decay range reads as "decays too fast".
        let too_slow = match model_t60(room, t60, fs, (-mid / 2.0).exp()) {
            Ok(m) => m > t60,
            Err(_) => false,
        };
        if too_slow {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((-(lo * hi).sqrt() / 2.0).exp())
}
