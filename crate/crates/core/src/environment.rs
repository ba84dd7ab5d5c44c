//! Cued orientation-change-detection task.
//!
//! A trial lasts seven timesteps. `t = 0` and `t = 2` are black, `t = 1`
//! shows the validity cue inside the cued patch, and `t = 3..=6` show four
//! Gabor patches whose orientations are jittered by fresh noise every step.
//! On change trials one patch rotates by `delta` from `t = 5` on.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const N_STEPS: usize = 7;
pub const N_PATCHES: usize = 4;
pub const IMAGE_SIDE: usize = 50;
pub const PATCH_SIDE: usize = 25;
pub const PATCH_PIXELS: usize = PATCH_SIDE * PATCH_SIDE;
/// First timestep at which a change is visible.
pub const T_CHANGE: usize = 5;
pub const T_CUE: usize = 1;
pub const T_ONSET: usize = 3;
pub const LAST_STEP: usize = N_STEPS - 1;

/// Stimulus location. `S1` top-left, `S2` bottom-left, `S3` top-right,
/// `S4` bottom-right; the index doubles as the patch index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Location {
    S1,
    S2,
    S3,
    S4,
}

impl Location {
    pub const ALL: [Location; 4] = [Location::S1, Location::S2, Location::S3, Location::S4];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Config(format!("location index {i} out of range 0..4")))
    }

    /// Top-left pixel of the patch in the 50×50 frame.
    pub fn origin(self) -> (usize, usize) {
        match self {
            Location::S1 => (0, 0),
            Location::S2 => (PATCH_SIDE, 0),
            Location::S3 => (0, PATCH_SIDE),
            Location::S4 => (PATCH_SIDE, PATCH_SIDE),
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.index() + 1)
    }
}

impl FromStr for Location {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "S1" | "1" => Ok(Location::S1),
            "S2" | "2" => Ok(Location::S2),
            "S3" | "3" => Ok(Location::S3),
            "S4" | "4" => Ok(Location::S4),
            other => Err(Error::Config(format!("unknown location {other:?}"))),
        }
    }
}

/// One of the four sanctioned cue-validity levels.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct CueValidity(f64);

impl CueValidity {
    pub const LEVELS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

    pub fn new(v: f64) -> Result<Self> {
        Self::LEVELS
            .iter()
            .find(|&&l| (l - v).abs() < 1e-9)
            .map(|&l| CueValidity(l))
            .ok_or_else(|| Error::Config(format!("cue validity {v} is not one of 0.25, 0.5, 0.75, 1.0")))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn all() -> [CueValidity; 4] {
        Self::LEVELS.map(CueValidity)
    }
}

impl fmt::Display for CueValidity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// How the orientation change magnitude is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaSpec {
    /// `Δ ~ U(−k, k)`.
    Uniform { k: f64 },
    Fixed(f64),
}

/// Everything `sample_trial` needs besides the seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialRequest {
    pub cue_position: Location,
    pub validity: CueValidity,
    pub delta: DeltaSpec,
    /// Forces the trial type; `None` draws it with probability one half.
    pub force_change: Option<bool>,
    /// Forces the change location; `None` draws it from the cue validity.
    pub force_location: Option<Location>,
    /// Orientation noise standard deviation in degrees.
    pub sigma: f64,
}

impl TrialRequest {
    pub fn new(cue_position: Location, validity: CueValidity, delta: DeltaSpec) -> Self {
        Self {
            cue_position,
            validity,
            delta,
            force_change: None,
            force_location: None,
            sigma: 5.0,
        }
    }
}

/// Complete parameters of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSpec {
    pub seed: u64,
    pub cue_position: Location,
    pub cue_validity: CueValidity,
    pub is_change_trial: bool,
    pub change_position: Option<Location>,
    /// Orientation change in degrees; zero on no-change trials.
    pub delta: f64,
    /// True orientations θ*_i in degrees, in `[0, 180)`.
    pub base_orientations: [f64; N_PATCHES],
    /// Per-patch, per-timestep orientation noise δ_it in degrees.
    pub noise: [[f64; N_STEPS]; N_PATCHES],
}

/// Draws a trial. RNG consumption order is fixed: trial type, change
/// location, Δ, four base orientations, then the 4×7 noise grid row by
/// row, all drawn whether or not the trial ends up using them.
pub fn sample_trial(seed: u64, req: &TrialRequest) -> Result<TrialSpec> {
    if !(req.sigma >= 0.0 && req.sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma {} must be finite and ≥ 0", req.sigma)));
    }
    if let DeltaSpec::Uniform { k } = req.delta {
        if !(k >= 0.0 && k.is_finite()) {
            return Err(Error::Config(format!("delta range {k} must be finite and ≥ 0")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let change_draw = rng.random::<f64>() < 0.5;
    let valid_draw = rng.random::<f64>() < req.validity.value();
    let other_draw = rng.random_range(0..3usize);
    let delta_draw = match req.delta {
        DeltaSpec::Uniform { k } => {
            let u: f64 = rng.random();
            (2.0 * u - 1.0) * k
        }
        DeltaSpec::Fixed(d) => {
            let _: f64 = rng.random();
            d
        }
    };
    let mut base = [0.0; N_PATCHES];
    for b in base.iter_mut() {
        *b = rng.random::<f64>() * 180.0;
    }
    let mut noise = [[0.0; N_STEPS]; N_PATCHES];
    for row in noise.iter_mut() {
        for v in row.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = z * req.sigma;
        }
    }

    let is_change = req.force_change.unwrap_or(change_draw);
    let change_position = if !is_change {
        None
    } else if let Some(loc) = req.force_location {
        Some(loc)
    } else if valid_draw {
        Some(req.cue_position)
    } else {
        let others: Vec<Location> = Location::ALL
            .into_iter()
            .filter(|&l| l != req.cue_position)
            .collect();
        Some(others[other_draw])
    };
    Ok(TrialSpec {
        seed,
        cue_position: req.cue_position,
        cue_validity: req.validity,
        is_change_trial: is_change,
        change_position,
        delta: if is_change { delta_draw } else { 0.0 },
        base_orientations: base,
        noise,
    })
}

impl TrialSpec {
    /// Orientation of patch `i` shown at timestep `t`, in `[0, 180)`.
    pub fn orientation(&self, i: usize, t: usize) -> f64 {
        let mut theta = self.base_orientations[i];
        if t >= T_CHANGE && self.change_position.map(Location::index) == Some(i) {
            theta += self.delta;
        }
        theta += self.noise[i][t];
        theta.rem_euclid(180.0)
    }

    /// The same stimuli with the change removed.
    pub fn without_change(&self) -> Self {
        Self {
            is_change_trial: false,
            change_position: None,
            delta: 0.0,
            ..self.clone()
        }
    }

    /// The same stimuli with a change of `delta` at `loc`.
    pub fn with_change(&self, loc: Location, delta: f64) -> Self {
        Self {
            is_change_trial: true,
            change_position: Some(loc),
            delta,
            ..self.clone()
        }
    }
}

/// Raster parameters for Gabor patches and the validity cue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub gabor_sigma: f64,
    pub gabor_wavelength: f64,
    pub gabor_phase: f64,
    pub gabor_aspect: f64,
    pub cue_disc_radius: f64,
    pub cue_ring_inner: f64,
    pub cue_ring_outer: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            gabor_sigma: 5.0,
            gabor_wavelength: 8.0,
            gabor_phase: 0.0,
            gabor_aspect: 1.0,
            cue_disc_radius: 5.0,
            cue_ring_inner: 8.0,
            cue_ring_outer: 10.0,
        }
    }
}

/// A 50×50 grayscale image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pixels: Vec<f32>,
}

impl Frame {
    pub fn black() -> Self {
        Self {
            pixels: vec![0.0; IMAGE_SIDE * IMAGE_SIDE],
        }
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * IMAGE_SIDE + col]
    }

    fn set(&mut self, row: usize, col: usize, v: f32) {
        self.pixels[row * IMAGE_SIDE + col] = v;
    }

    pub fn is_black(&self) -> bool {
        self.pixels.iter().all(|&p| p == 0.0)
    }

    /// Row-major copy of one 25×25 patch.
    pub fn patch(&self, loc: Location) -> Vec<f32> {
        let (r0, c0) = loc.origin();
        let mut out = Vec::with_capacity(PATCH_PIXELS);
        for r in 0..PATCH_SIDE {
            out.extend_from_slice(&self.pixels[(r0 + r) * IMAGE_SIDE + c0..(r0 + r) * IMAGE_SIDE + c0 + PATCH_SIDE]);
        }
        out
    }

    fn write_patch(&mut self, loc: Location, patch: &[f32]) {
        let (r0, c0) = loc.origin();
        for r in 0..PATCH_SIDE {
            for c in 0..PATCH_SIDE {
                self.set(r0 + r, c0 + c, patch[r * PATCH_SIDE + c]);
            }
        }
    }

    /// Writes the frame as an 8-bit binary portable graymap (P5).
    pub fn write_pgm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P5\n{IMAGE_SIDE} {IMAGE_SIDE}\n255\n")?;
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        out.write_all(&bytes)?;
        Ok(())
    }
}

/// A single Gabor patch with orientation `theta_deg`, values in `[0, 1]`.
pub fn gabor_patch(theta_deg: f64, cfg: &RenderConfig) -> Vec<f32> {
    let c = (PATCH_SIDE as f64 - 1.0) / 2.0;
    let (s, co) = theta_deg.to_radians().sin_cos();
    let mut out = Vec::with_capacity(PATCH_PIXELS);
    for r in 0..PATCH_SIDE {
        for col in 0..PATCH_SIDE {
            let x = col as f64 - c;
            let y = c - r as f64;
            let xr = x * co + y * s;
            let yr = -x * s + y * co;
            let env = (-(xr * xr + cfg.gabor_aspect * cfg.gabor_aspect * yr * yr)
                / (2.0 * cfg.gabor_sigma * cfg.gabor_sigma))
                .exp();
            let carrier = (2.0 * std::f64::consts::PI * xr / cfg.gabor_wavelength + cfg.gabor_phase).cos();
            out.push((0.5 + 0.5 * env * carrier) as f32);
        }
    }
    out
}

/// The cue raster: a filled disc plus an annular arc starting at angle 0
/// and sweeping counterclockwise over `validity` of the circle.
pub fn cue_patch(validity: CueValidity, cfg: &RenderConfig) -> Vec<f32> {
    let c = (PATCH_SIDE as f64 - 1.0) / 2.0;
    let sweep = validity.value() * std::f64::consts::TAU;
    let mut out = Vec::with_capacity(PATCH_PIXELS);
    for r in 0..PATCH_SIDE {
        for col in 0..PATCH_SIDE {
            let dx = col as f64 - c;
            let dy = c - r as f64;
            let radius = (dx * dx + dy * dy).sqrt();
            let lit = if radius <= cfg.cue_disc_radius {
                true
            } else if radius >= cfg.cue_ring_inner && radius <= cfg.cue_ring_outer {
                let angle = dy.atan2(dx).rem_euclid(std::f64::consts::TAU);
                angle < sweep || validity.value() >= 1.0
            } else {
                false
            };
            out.push(if lit { 1.0 } else { 0.0 });
        }
    }
    out
}

/// Renders timestep `t` of a trial.
pub fn render(spec: &TrialSpec, t: usize, cfg: &RenderConfig) -> Result<Frame> {
    if t >= N_STEPS {
        return Err(Error::Config(format!("timestep {t} outside 0..{N_STEPS}")));
    }
    let mut frame = Frame::black();
    match t {
        T_CUE => frame.write_patch(spec.cue_position, &cue_patch(spec.cue_validity, cfg)),
        t if t >= T_ONSET => {
            for loc in Location::ALL {
                frame.write_patch(loc, &gabor_patch(spec.orientation(loc.index(), t), cfg));
            }
        }
        _ => {}
    }
    Ok(frame)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Wait,
    Declare,
}

impl Action {
    pub fn index(self) -> usize {
        match self {
            Action::Wait => 0,
            Action::Declare => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Action::Wait
        } else {
            Action::Declare
        }
    }
}

/// Signal-detection classification of a finished trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    Hit,
    Miss,
    FalseAlarm,
    CorrectReject,
}

impl Outcome {
    pub fn code(self) -> &'static str {
        match self {
            Outcome::Hit => "H",
            Outcome::Miss => "M",
            Outcome::FalseAlarm => "FA",
            Outcome::CorrectReject => "CR",
        }
    }
}

impl FromStr for Outcome {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "H" => Ok(Outcome::Hit),
            "M" => Ok(Outcome::Miss),
            "FA" => Ok(Outcome::FalseAlarm),
            "CR" => Ok(Outcome::CorrectReject),
            other => Err(Error::Format(format!("unknown outcome {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    pub reward: u8,
    pub terminal: bool,
    pub t: usize,
    /// Set on terminal steps.
    pub outcome: Option<Outcome>,
}

/// Reward and termination for taking `action` at timestep `t`.
pub fn score(spec: &TrialSpec, t: usize, action: Action) -> StepOutcome {
    let change = spec.is_change_trial;
    let (reward, terminal, outcome) = match action {
        Action::Declare => {
            let hit = change && t >= T_CHANGE;
            let outcome = match (change, hit) {
                (true, true) => Outcome::Hit,
                (true, false) => Outcome::Miss,
                (false, _) => Outcome::FalseAlarm,
            };
            (u8::from(hit), true, Some(outcome))
        }
        Action::Wait if t >= LAST_STEP => {
            if change {
                (0, true, Some(Outcome::Miss))
            } else {
                (1, true, Some(Outcome::CorrectReject))
            }
        }
        Action::Wait => (0, false, None),
    };
    StepOutcome {
        reward,
        terminal,
        t,
        outcome,
    }
}

/// A trial in progress.
#[derive(Debug, Clone)]
pub struct Episode {
    spec: TrialSpec,
    t: usize,
    finished: Option<StepOutcome>,
}

impl Episode {
    pub fn new(spec: TrialSpec) -> Self {
        Self {
            spec,
            t: 0,
            finished: None,
        }
    }

    pub fn spec(&self) -> &TrialSpec {
        &self.spec
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.finished.is_some()
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome> {
        if let Some(done) = self.finished {
            return Err(Error::Protocol(format!(
                "action {action:?} after trial {} ended at t={}",
                self.spec.seed, done.t
            )));
        }
        let out = score(&self.spec, self.t, action);
        if out.terminal {
            self.finished = Some(out);
        } else {
            self.t += 1;
        }
        Ok(out)
    }
}

/// Curriculum schedule on the Δ range half-width `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifficultySchedule {
    pub k_start: f64,
    pub k_min: f64,
    pub shrink: f64,
    pub threshold: f64,
    pub window: usize,
}

impl Default for DifficultySchedule {
    fn default() -> Self {
        Self {
            k_start: 65.0,
            k_min: 10.0,
            shrink: 0.9,
            threshold: 0.75,
            window: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifficultyState {
    pub k: f64,
    pub trials_seen: usize,
    pub reward_sum: f64,
    pub schedule: DifficultySchedule,
}

impl DifficultyState {
    pub fn new(schedule: DifficultySchedule) -> Self {
        Self {
            k: schedule.k_start,
            trials_seen: 0,
            reward_sum: 0.0,
            schedule,
        }
    }

    /// Adds one finished trial; evaluates the schedule when a window completes.
    pub fn record(&mut self, reward: f64) {
        self.trials_seen += 1;
        self.reward_sum += reward;
        if self.trials_seen >= self.schedule.window {
            let rate = self.reward_sum / self.trials_seen as f64;
            *self = update_difficulty(*self, rate);
        }
    }
}

/// Shrinks `k` (never below the floor) when the window reward rate clears
/// the threshold, and opens a fresh window.
pub fn update_difficulty(state: DifficultyState, window_rate: f64) -> DifficultyState {
    let s = state.schedule;
    let k = if window_rate > s.threshold {
        (state.k * s.shrink).max(s.k_min)
    } else {
        state.k
    };
    DifficultyState {
        k,
        trials_seen: 0,
        reward_sum: 0.0,
        schedule: s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(v: f64) -> TrialRequest {
        TrialRequest::new(Location::S1, CueValidity::new(v).unwrap(), DeltaSpec::Uniform { k: 65.0 })
    }

    #[test]
    fn full_validity_always_changes_at_cue() {
        let mut r = req(1.0);
        r.force_change = Some(true);
        for seed in 0..500 {
            let s = sample_trial(seed, &r).unwrap();
            assert_eq!(s.change_position, Some(Location::S1));
        }
    }

    #[test]
    fn same_seed_same_trial() {
        let a = sample_trial(42, &req(0.5)).unwrap();
        let b = sample_trial(42, &req(0.5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    #[test]
    fn invalid_validity_is_config_error() {
        assert!(matches!(CueValidity::new(0.3), Err(Error::Config(_))));
    }

    #[test]
    fn no_change_trials_have_zero_delta_and_orientations_in_range() {
        for seed in 0..300 {
            let s = sample_trial(seed, &req(0.75)).unwrap();
            if !s.is_change_trial {
                assert_eq!(s.delta, 0.0);
                assert!(s.change_position.is_none());
            } else {
                assert!(s.delta.abs() <= 65.0);
            }
            for i in 0..4 {
                for t in 0..N_STEPS {
                    let o = s.orientation(i, t);
                    assert!((0.0..180.0).contains(&o));
                }
            }
        }
    }

    #[test]
    fn black_and_cue_frames() {
        let s = sample_trial(3, &req(0.5)).unwrap();
        let cfg = RenderConfig::default();
        assert!(render(&s, 0, &cfg).unwrap().is_black());
        assert!(render(&s, 2, &cfg).unwrap().is_black());
        let cue = render(&s, 1, &cfg).unwrap();
        for loc in Location::ALL {
            let lit = cue.patch(loc).iter().any(|&p| p > 0.0);
            assert_eq!(lit, loc == s.cue_position);
        }
        assert!(render(&s, 7, &cfg).is_err());
    }

    #[test]
    fn zero_delta_change_renders_like_no_change() {
        let cfg = RenderConfig::default();
        let base = sample_trial(11, &req(0.5)).unwrap().without_change();
        let zero = base.with_change(Location::S3, 0.0);
        for t in 0..N_STEPS {
            assert_eq!(render(&base, t, &cfg).unwrap(), render(&zero, t, &cfg).unwrap());
        }
    }

    #[test]
    fn change_only_touches_change_patch() {
        let cfg = RenderConfig::default();
        let base = sample_trial(12, &req(0.5)).unwrap().without_change();
        let changed = base.with_change(Location::S2, 40.0);
        for t in 0..N_STEPS {
            let (a, b) = (render(&base, t, &cfg).unwrap(), render(&changed, t, &cfg).unwrap());
            for loc in Location::ALL {
                let same = a.patch(loc) == b.patch(loc);
                assert_eq!(same, !(t >= T_CHANGE && loc == Location::S2), "t={t} {loc}");
            }
        }
    }

    fn arc_pixels(v: f64) -> usize {
        let cfg = RenderConfig::default();
        let none = cue_patch_disc_only(&cfg);
        cue_patch(CueValidity::new(v).unwrap(), &cfg)
            .iter()
            .zip(&none)
            .filter(|(&a, &b)| a > 0.0 && b == 0.0)
            .count()
    }

    // Pixel-count oracle: rasterize the disc alone and subtract it.
    fn cue_patch_disc_only(cfg: &RenderConfig) -> Vec<f32> {
        let c = 12.0;
        let mut out = Vec::new();
        for r in 0..PATCH_SIDE {
            for col in 0..PATCH_SIDE {
                let (dx, dy) = (col as f64 - c, c - r as f64);
                out.push(if (dx * dx + dy * dy).sqrt() <= cfg.cue_disc_radius { 1.0 } else { 0.0 });
            }
        }
        out
    }

    #[test]
    fn half_validity_arc_is_half_the_ring() {
        let full = arc_pixels(1.0);
        let half = arc_pixels(0.5);
        let ring_width = 3; // radii 8..=10
        assert!(full > 0);
        assert!((2 * half).abs_diff(full) <= 2 * ring_width, "half {half} full {full}");
        let quarter = arc_pixels(0.25);
        assert!((4 * quarter).abs_diff(full) <= 4 * ring_width, "quarter {quarter} full {full}");
    }

    #[test]
    fn gabor_is_axial() {
        let cfg = RenderConfig::default();
        let a = gabor_patch(30.0, &cfg);
        let b = gabor_patch(210.0, &cfg);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(a.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn scoring_rules() {
        let change = sample_trial(1, &TrialRequest { force_change: Some(true), ..req(1.0) }).unwrap();
        let none = change.without_change();
        let o = score(&change, 5, Action::Declare);
        assert_eq!((o.reward, o.terminal, o.outcome), (1, true, Some(Outcome::Hit)));
        let o = score(&change, 3, Action::Declare);
        assert_eq!((o.reward, o.terminal, o.outcome), (0, true, Some(Outcome::Miss)));
        let o = score(&none, 6, Action::Wait);
        assert_eq!((o.reward, o.terminal, o.outcome), (1, true, Some(Outcome::CorrectReject)));
        let o = score(&none, 4, Action::Wait);
        assert_eq!((o.reward, o.terminal), (0, false));
        let o = score(&change, 6, Action::Wait);
        assert_eq!((o.reward, o.outcome), (0, Some(Outcome::Miss)));
        assert_eq!(score(&none, 6, Action::Declare).outcome, Some(Outcome::FalseAlarm));
    }

    #[test]
    fn acting_after_terminal_is_protocol_error() {
        let spec = sample_trial(2, &req(0.5)).unwrap();
        let mut ep = Episode::new(spec);
        ep.step(Action::Declare).unwrap();
        assert!(matches!(ep.step(Action::Wait), Err(Error::Protocol(_))));
    }

    #[test]
    fn every_policy_gets_one_outcome_and_at_most_one_reward() {
        for seed in 0..50 {
            let spec = sample_trial(seed, &req(0.5)).unwrap();
            for declare_at in 0..=N_STEPS {
                let mut ep = Episode::new(spec.clone());
                let mut total = 0u32;
                let mut outcomes = 0;
                while !ep.is_done() {
                    let a = if ep.t() == declare_at { Action::Declare } else { Action::Wait };
                    let o = ep.step(a).unwrap();
                    total += u32::from(o.reward);
                    outcomes += usize::from(o.outcome.is_some());
                }
                assert!(total <= 1);
                assert_eq!(outcomes, 1);
            }
        }
    }

    #[test]
    fn difficulty_schedule() {
        let s = DifficultyState::new(DifficultySchedule::default());
        let up = update_difficulty(s, 0.80);
        assert!((up.k - 58.5).abs() < 1e-12);
        assert_eq!(update_difficulty(s, 0.5).k, 65.0);
        let mut st = s;
        for _ in 0..100 {
            let next = update_difficulty(st, 0.99);
            assert!(next.k <= st.k);
            st = next;
        }
        assert_eq!(st.k, 10.0);
    }

    #[test]
    fn pgm_header_and_size() {
        let mut buf = Vec::new();
        Frame::black().write_pgm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n50 50\n255\n"));
        assert_eq!(buf.len(), b"P5\n50 50\n255\n".len() + 2500);
    }
}
