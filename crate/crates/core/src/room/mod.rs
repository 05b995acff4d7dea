//! Rectangular-room acoustics: Sabine absorption, image-source RIRs,
//! direct/early/late decomposition and Schroeder T60 measurement.

mod image;
mod schroeder;

pub use image::{
    calibrate_reflection, default_max_order, model_t60, rir_len, simulate_rir, simulate_rir_with,
    Reflection, RirOptions,
};
pub use schroeder::{energy_decay_curve, measure_t60_schroeder};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;
/// Direct path ends this long after the main peak.
pub const DIRECT_WINDOW_S: f64 = 0.001;
/// Early reflections end this long after the main peak.
pub const EARLY_WINDOW_S: f64 = 0.050;

/// Rooms 1-10 (seen) of the simulated corpus.
pub const TRAIN_ROOMS: [[f64; 3]; 10] = [
    [9.0, 8.0, 7.0],
    [10.0, 7.0, 3.0],
    [6.0, 6.0, 10.0],
    [8.0, 10.0, 4.0],
    [7.0, 7.0, 8.0],
    [7.0, 9.0, 5.0],
    [8.0, 8.0, 10.0],
    [10.0, 10.0, 8.0],
    [8.0, 8.0, 6.0],
    [7.0, 8.0, 6.0],
];

/// Rooms 11-14 (unseen) of the simulated corpus.
pub const TEST_ROOMS: [[f64; 3]; 4] = [
    [9.0, 9.0, 10.0],
    [9.0, 7.0, 9.0],
    [9.0, 10.0, 5.0],
    [10.0, 10.0, 7.0],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub dims: [f64; 3],
    pub source_pos: [f64; 3],
    pub mic_pos: [f64; 3],
}

impl RoomSpec {
    pub fn new(dims: [f64; 3], source_pos: [f64; 3], mic_pos: [f64; 3]) -> Result<Self> {
        let room = Self {
            dims,
            source_pos,
            mic_pos,
        };
        room.validate()?;
        Ok(room)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(invalid(format!("room dimensions must be positive: {:?}", self.dims)));
        }
        let inside = |p: &[f64; 3]| p.iter().zip(&self.dims).all(|(x, l)| *x > 0.0 && x < l);
        if !inside(&self.source_pos) {
            return Err(invalid(format!("source {:?} is outside the room", self.source_pos)));
        }
        if !inside(&self.mic_pos) {
            return Err(invalid(format!("microphone {:?} is outside the room", self.mic_pos)));
        }
        if self.distance() == 0.0 {
            return Err(invalid("source and microphone coincide"));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [x, y, z] = self.dims;
        2.0 * (x * y + x * z + y * z)
    }

    pub fn distance(&self) -> f64 {
        dist(&self.source_pos, &self.mic_pos)
    }

    /// Random placement with a fixed source-mic `distance` and at least
    /// `clearance` metres to every wall.
    pub fn random_placement<R: Rng>(
        dims: [f64; 3],
        distance: f64,
        clearance: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.iter().any(|d| *d <= 2.0 * clearance) {
            return Err(invalid(format!(
                "room {dims:?} too small for {clearance} m wall clearance"
            )));
        }
        let ok = |p: &[f64; 3]| {
            p.iter()
                .zip(&dims)
                .all(|(x, l)| *x >= clearance && *x <= l - clearance)
        };
        for _ in 0..10_000 {
            let mic: [f64; 3] = std::array::from_fn(|i| rng.gen_range(clearance..dims[i] - clearance));
            // Uniform direction on the sphere.
            let z: f64 = rng.gen_range(-1.0..1.0);
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).sqrt();
            let dir = [r * phi.cos(), r * phi.sin(), z];
            let src: [f64; 3] = std::array::from_fn(|i| mic[i] + distance * dir[i]);
            if ok(&src) {
                return Self::new(dims, src, mic);
            }
        }
        Err(invalid(format!(
            "could not place source {distance} m from mic in room {dims:?}"
        )))
    }
}

pub(crate) fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Absorption coefficient from Sabine's formula, `0.16 V / (S T60)`.
pub fn sabine_absorption(room: &RoomSpec, t60: f64) -> Result<f64> {
    if !(t60 > 0.0) || !t60.is_finite() {
        return Err(invalid(format!("t60 must be positive, got {t60}")));
    }
    let alpha = 0.16 * room.volume() / (room.surface() * t60);
    if alpha > 1.0 {
        return Err(Error::InfeasibleT60 { t60, alpha });
    }
    Ok(alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    pub taps: Vec<f64>,
    pub sample_rate: u32,
    pub nominal_t60: f64,
}

impl Rir {
    pub fn new(taps: Vec<f64>, sample_rate: u32, nominal_t60: f64) -> Result<Self> {
        if taps.is_empty() {
            return Err(invalid("empty RIR"));
        }
        if taps.iter().any(|v| !v.is_finite()) {
            return Err(invalid("RIR contains non-finite taps"));
        }
        if taps.iter().all(|v| *v == 0.0) {
            return Err(invalid("RIR is all zeros"));
        }
        Ok(Self {
            taps,
            sample_rate,
            nominal_t60,
        })
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn zero_padded(&self, len: usize) -> Self {
        let mut taps = self.taps.clone();
        if taps.len() < len {
            taps.resize(len, 0.0);
        }
        Self { taps, ..*self }
    }

    pub fn peak_index(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.taps.iter().enumerate() {
            if v.abs() > self.taps[best].abs() {
                best = i;
            }
        }
        best
    }
}

/// Direct, early and late parts; each spans the full RIR length.
#[derive(Debug, Clone, PartialEq)]
pub struct RirParts {
    pub direct: Vec<f64>,
    pub early: Vec<f64>,
    pub late: Vec<f64>,
    /// Inclusive end indices of the direct and early intervals.
    pub boundaries: (usize, usize),
    pub sample_rate: u32,
}

impl RirParts {
    pub fn direct_early(&self) -> Vec<f64> {
        self.direct.iter().zip(&self.early).map(|(d, e)| d + e).collect()
    }

    pub fn full(&self) -> Vec<f64> {
        self.direct
            .iter()
            .zip(&self.early)
            .zip(&self.late)
            .map(|((d, e), l)| d + e + l)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.direct.len()
    }

    pub fn is_empty(&self) -> bool {
        self.direct.is_empty()
    }
}

/// Splits at 1 ms and 50 ms after the largest-magnitude tap.
pub fn decompose_rir(h: &Rir) -> Result<RirParts> {
    if h.taps.iter().all(|v| *v == 0.0) {
        return Err(invalid("cannot decompose an all-zero RIR"));
    }
    let fs = h.sample_rate as f64;
    let p = h.peak_index();
    let last = h.taps.len() - 1;
    let direct_end = (p + (DIRECT_WINDOW_S * fs).round() as usize).min(last);
    let early_end = (p + (EARLY_WINDOW_S * fs).round() as usize).min(last);

    let n = h.taps.len();
    let (mut direct, mut early, mut late) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for (i, &v) in h.taps.iter().enumerate() {
        if i <= direct_end {
            direct[i] = v;
        } else if i <= early_end {
            early[i] = v;
        } else {
            late[i] = v;
        }
    }
    Ok(RirParts {
        direct,
        early,
        late,
        boundaries: (direct_end, early_end),
        sample_rate: h.sample_rate,
    })
}

/// Sidecar metadata persisted next to a simulated RIR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RirRecord {
    pub dims: [f64; 3],
    pub source_pos: [f64; 3],
    pub mic_pos: [f64; 3],
    pub nominal_t60: f64,
    pub measured_t60: Option<f64>,
    pub fs: u32,
    pub max_order: u32,
    /// Uniform wall reflection coefficient used for the simulation.
    pub reflection: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn room(dims: [f64; 3]) -> RoomSpec {
        RoomSpec::new(dims, [1.0, 1.0, 1.0], [2.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn sabine_examples() {
        let a = sabine_absorption(&room([9.0, 8.0, 7.0]), 0.6).unwrap();
        assert!((a - 80.64 / 229.2).abs() < 1e-12);
        assert!((a - 0.3518).abs() < 1e-4);
        let b = sabine_absorption(&room([9.0, 8.0, 7.0]), 1.2).unwrap();
        assert!((b - a / 2.0).abs() < 1e-15);

        let tiny = RoomSpec::new([1.0; 3], [0.2, 0.5, 0.5], [0.8, 0.5, 0.5]).unwrap();
        let c = sabine_absorption(&tiny, 1.5).unwrap();
        assert!((c - 0.16 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn sabine_infeasible_and_invalid() {
        let tiny = RoomSpec::new([1.0; 3], [0.2, 0.5, 0.5], [0.8, 0.5, 0.5]).unwrap();
        assert!(matches!(sabine_absorption(&tiny, 0.01), Err(Error::InfeasibleT60 { .. })));
        assert!(sabine_absorption(&tiny, 0.0).is_err());
    }

    #[test]
    fn room_validation() {
        assert!(RoomSpec::new([5.0, 4.0, 3.0], [6.0, 1.0, 1.0], [1.0, 1.0, 1.0]).is_err());
        assert!(RoomSpec::new([5.0, 4.0, 3.0], [1.0, 1.0, 1.0], [1.0, 1.0, 1.0]).is_err());
        assert!(RoomSpec::new([5.0, -4.0, 3.0], [1.0, 1.0, 1.0], [2.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn unit_impulse_is_all_direct() {
        let h = Rir::new(vec![1.0, 0.0, 0.0, 0.0], 8000, 0.3).unwrap();
        let p = decompose_rir(&h).unwrap();
        assert_eq!(p.direct, h.taps);
        assert!(p.early.iter().all(|v| *v == 0.0));
        assert!(p.late.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn boundaries_at_8khz() {
        let mut taps = vec![0.01; 1000];
        taps[37] = 1.0;
        let p = decompose_rir(&Rir::new(taps.clone(), 8000, 0.3).unwrap()).unwrap();
        assert_eq!(p.boundaries, (37 + 8, 37 + 400));
        for i in 0..taps.len() {
            let parts = [p.direct[i], p.early[i], p.late[i]];
            assert_eq!(parts.iter().filter(|v| **v != 0.0).count(), 1);
            assert_eq!((p.direct[i] + p.early[i] + p.late[i]).to_bits(), taps[i].to_bits());
        }
        assert!(p.late[..=437].iter().all(|v| *v == 0.0));
        assert!(p.direct[46..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn all_zero_rir_rejected() {
        let h = Rir {
            taps: vec![0.0; 5],
            sample_rate: 8000,
            nominal_t60: 0.3,
        };
        assert!(decompose_rir(&h).is_err());
        assert!(Rir::new(vec![0.0; 5], 8000, 0.3).is_err());
    }

    #[test]
    fn placement_respects_distance_and_clearance() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let r = RoomSpec::random_placement([6.0, 6.0, 3.0], 1.0, 0.5, &mut rng).unwrap();
            assert!((r.distance() - 1.0).abs() < 1e-12);
            for p in [r.source_pos, r.mic_pos] {
                for (x, l) in p.iter().zip(&r.dims) {
                    assert!(*x >= 0.5 - 1e-12 && *x <= l - 0.5 + 1e-12);
                }
            }
        }
    }
}
