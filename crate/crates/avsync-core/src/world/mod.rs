//! Procedural audio-video world with exact ground truth.
//!
//! Scenes are pure functions of their spec: moving shapes over a seeded
//! static background, one of which is the *sounding* instance. The sounding
//! instance emits a short burst (and visibly pulses) at every event frame,
//! so audio energy and masked motion energy are locked by construction.
//! Edit pairs rebuild the same scene with named attributes swapped; all
//! other randomness is derived from tagged sub-seeds and stays fixed.

pub mod descriptor;

pub use descriptor::{
    nearest_freq, nearest_palette, parse_token, token_index, vocab_size, vocabulary, Descriptor,
    Shape, SizeClass, TimingToken, Token, TrajKind, VoiceKind, FREQS, MAX_TOKENS, PALETTE,
    PERIODS,
};

use crate::audio::synth;
use crate::error::{CoreError, Result};
use crate::media::{AudioTrack, InstanceMask, VideoClip};
use crate::rng::Stream;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Background hum frequency (Hz); always present in scene audio.
pub const HUM_FREQ: f64 = 60.0;
pub const HUM_AMP: f64 = 0.05;
/// Event burst length in seconds.
pub const BURST_SECONDS: f64 = 0.08;
pub const BURST_AMP: f64 = 0.55;
/// Scene audio is peak-limited to this value.
pub const AUDIO_PEAK: f64 = 0.9;
/// How far the sounding instance's colour moves toward white on an event
/// frame. The visible pulse is what ties masked motion energy to the audio.
pub const FLASH_GAIN: f64 = 0.6;

const TAG_TEXTURE: u64 = 0x7e01;
const TAG_NOISE_VOICE: u64 = 0x7e02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Voice {
    pub kind: VoiceKind,
    /// Base frequency in Hz; must stay below Nyquist.
    pub freq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Trajectory {
    /// Straight motion with wall reflection. Units: px and px/frame.
    Bounce { pos: [f64; 2], vel: [f64; 2] },
    /// Circular motion; `omega` in radians/frame.
    Orbit { center: [f64; 2], orbit_radius: f64, omega: f64, phase: f64 },
    /// Straight motion, no reflection; must stay in frame for all T.
    Drift { pos: [f64; 2], vel: [f64; 2] },
}

impl Trajectory {
    pub fn kind(&self) -> TrajKind {
        match self {
            Trajectory::Bounce { .. } => TrajKind::Bounce,
            Trajectory::Orbit { .. } => TrajKind::Orbit,
            Trajectory::Drift { .. } => TrajKind::Drift,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EventRule {
    /// Fire whenever a velocity component flips sign.
    OnBounce,
    /// Fire at these seeded frames.
    OnFlash { frames: Vec<usize> },
    /// Fire at frames {0, k, 2k, ...}.
    Periodic { every: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub shape: Shape,
    pub color: [f64; 3],
    pub radius: f64,
    pub trajectory: Trajectory,
    pub sounding: bool,
    pub voice: Voice,
    pub event_rule: EventRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub color: [f64; 3],
    /// Amplitude of the seeded static texture.
    pub texture_amp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: u32,
    pub sample_rate: u32,
    pub instances: Vec<InstanceSpec>,
    pub background: BackgroundSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub video: VideoClip,
    pub audio: AudioTrack,
    pub mask: InstanceMask,
    pub descriptor: Descriptor,
    pub event_times: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPair {
    pub source: SceneSample,
    pub target: SceneSample,
    pub edited_descriptor: Descriptor,
}

impl SceneSpec {
    pub fn audio_len(&self) -> usize {
        self.frames * self.sample_rate as usize / self.fps as usize
    }

    pub fn sounding_index(&self) -> Result<usize> {
        let idx: Vec<usize> = self
            .instances
            .iter()
            .enumerate()
            .filter(|(_, i)| i.sounding)
            .map(|(n, _)| n)
            .collect();
        match idx.as_slice() {
            [one] => Ok(*one),
            _ => Err(CoreError::invalid(format!(
                "exactly one sounding instance required, found {}",
                idx.len()
            ))),
        }
    }

    pub fn sounding(&self) -> Result<&InstanceSpec> {
        Ok(&self.instances[self.sounding_index()?])
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(CoreError::invalid("scene dimensions must be positive"));
        }
        if self.fps == 0 || self.sample_rate == 0 {
            return Err(CoreError::invalid("fps and sample_rate must be positive"));
        }
        if (self.frames * self.sample_rate as usize) % self.fps as usize != 0 {
            return Err(CoreError::invalid(format!(
                "T*S/fps must be an integer (T={} S={} fps={})",
                self.frames, self.sample_rate, self.fps
            )));
        }
        if self.instances.is_empty() || self.instances.len() > 3 {
            return Err(CoreError::invalid(format!(
                "instance count {} outside 1..=3",
                self.instances.len()
            )));
        }
        self.sounding_index()?;
        let nyquist = self.sample_rate as f64 / 2.0;
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.voice.freq >= nyquist {
                return Err(CoreError::invalid(format!(
                    "instance {i}: voice frequency {} >= Nyquist {nyquist}",
                    inst.voice.freq
                )));
            }
            if inst.radius <= 0.0 {
                return Err(CoreError::invalid(format!("instance {i}: radius must be positive")));
            }
            let track = simulate_positions(&inst.trajectory, inst.radius, self, self.frames);
            for (f, p) in track.positions.iter().enumerate() {
                let r = inst.radius;
                if p[0] < r - 1e-9
                    || p[0] > self.width as f64 - r + 1e-9
                    || p[1] < r - 1e-9
                    || p[1] > self.height as f64 - r + 1e-9
                {
                    return Err(CoreError::invalid(format!(
                        "instance {i} leaves the frame at frame {f} (center {:?}, radius {r})",
                        p
                    )));
                }
            }
            if let EventRule::Periodic { every } = inst.event_rule {
                if every == 0 {
                    return Err(CoreError::invalid(format!("instance {i}: periodic(0) invalid")));
                }
            }
            if let EventRule::OnFlash { frames } = &inst.event_rule {
                if frames.iter().any(|&f| f >= self.frames) {
                    return Err(CoreError::invalid(format!(
                        "instance {i}: flash frame beyond clip length"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-frame centers plus the frames where a reflection happened.
pub struct Track {
    pub positions: Vec<[f64; 2]>,
    pub bounce_frames: Vec<usize>,
}

/// Simulate a trajectory for `frames` steps. Bounce reflects at the walls so
/// the instance (center +/- radius) stays inside; the reflection frame is an
/// event frame.
pub fn simulate_positions(traj: &Trajectory, radius: f64, spec: &SceneSpec, frames: usize) -> Track {
    let (w, h) = (spec.width as f64, spec.height as f64);
    match traj {
        Trajectory::Bounce { pos, vel } => {
            let (mut p, mut v) = (*pos, *vel);
            let mut positions = vec![p];
            let mut bounce_frames = Vec::new();
            for f in 1..frames {
                let mut bounced = false;
                for (axis, hi) in [(0usize, w), (1usize, h)] {
                    let mut x = p[axis] + v[axis];
                    if x < radius {
                        x = 2.0 * radius - x;
                        v[axis] = -v[axis];
                        bounced = true;
                    } else if x > hi - radius {
                        x = 2.0 * (hi - radius) - x;
                        v[axis] = -v[axis];
                        bounced = true;
                    }
                    p[axis] = x;
                }
                if bounced {
                    bounce_frames.push(f);
                }
                positions.push(p);
            }
            Track { positions, bounce_frames }
        }
        Trajectory::Orbit { center, orbit_radius, omega, phase } => {
            let positions = (0..frames)
                .map(|f| {
                    let a = phase + omega * f as f64;
                    [center[0] + orbit_radius * a.cos(), center[1] + orbit_radius * a.sin()]
                })
                .collect();
            Track { positions, bounce_frames: Vec::new() }
        }
        Trajectory::Drift { pos, vel } => {
            let positions = (0..frames)
                .map(|f| [pos[0] + vel[0] * f as f64, pos[1] + vel[1] * f as f64])
                .collect();
            Track { positions, bounce_frames: Vec::new() }
        }
    }
}

/// Is pixel center (x, y) covered by `shape` centered at `p`?
fn covers(shape: Shape, p: [f64; 2], radius: f64, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - p[0], y - p[1]);
    match shape {
        Shape::Circle => dx * dx + dy * dy <= radius * radius,
        Shape::Square => dx.abs() <= radius && dy.abs() <= radius,
        Shape::Triangle => {
            // Equilateral, circumradius `radius`, apex pointing up (-y).
            let verts: [[f64; 2]; 3] = [
                [0.0, -radius],
                [radius * (std::f64::consts::PI / 6.0).cos(), radius * 0.5],
                [-radius * (std::f64::consts::PI / 6.0).cos(), radius * 0.5],
            ];
            let mut sign = 0i8;
            for i in 0..3 {
                let a = verts[i];
                let b = verts[(i + 1) % 3];
                let cross = (b[0] - a[0]) * (dy - a[1]) - (b[1] - a[1]) * (dx - a[0]);
                let s = if cross >= 0.0 { 1 } else { -1 };
                if sign == 0 {
                    sign = s;
                } else if s != sign {
                    return false;
                }
            }
            true
        }
    }
}

/// Event frames of the sounding instance.
pub fn scene_event_times(spec: &SceneSpec) -> Result<Vec<usize>> {
    let inst = spec.sounding()?;
    Ok(match &inst.event_rule {
        EventRule::OnBounce => {
            simulate_positions(&inst.trajectory, inst.radius, spec, spec.frames).bounce_frames
        }
        EventRule::OnFlash { frames } => frames.clone(),
        EventRule::Periodic { every } => (0..spec.frames).step_by(*every).collect(),
    })
}

/// Descriptor of the sounding instance: one token per attribute.
pub fn scene_descriptor(spec: &SceneSpec) -> Result<Descriptor> {
    let inst = spec.sounding()?;
    let frac = inst.radius / spec.width.min(spec.height) as f64;
    let size = [SizeClass::Small, SizeClass::Medium, SizeClass::Large]
        .into_iter()
        .min_by(|a, b| {
            (a.radius_frac() - frac).abs().total_cmp(&(b.radius_frac() - frac).abs())
        })
        .unwrap();
    let timing = match &inst.event_rule {
        EventRule::OnBounce => TimingToken::OnBounce,
        EventRule::OnFlash { .. } => TimingToken::OnFlash,
        EventRule::Periodic { every } => TimingToken::Periodic(*every as u32),
    };
    Descriptor::new(vec![
        Token::Shape(inst.shape),
        Token::Color(nearest_palette(inst.color)),
        Token::Size(size),
        Token::Trajectory(inst.trajectory.kind()),
        Token::Voice(inst.voice.kind),
        Token::Freq(nearest_freq(inst.voice.freq)),
        Token::Timing(timing),
    ])
}

fn background_frame(spec: &SceneSpec) -> Vec<f64> {
    let (h, w) = (spec.height, spec.width);
    let mut rng = Stream::new(spec.seed, TAG_TEXTURE);
    let mut px = vec![0.0; h * w * 3];
    for v in px.chunks_mut(3) {
        for (ch, out) in v.iter_mut().enumerate() {
            let n = spec.background.texture_amp * (2.0 * rng.uniform() - 1.0);
            *out = (spec.background.color[ch] + n).clamp(0.0, 1.0);
        }
    }
    px
}

/// Synthesize the audio track: background hum plus one voice burst per event.
fn scene_audio(spec: &SceneSpec, event_times: &[usize]) -> Result<AudioTrack> {
    let len = spec.audio_len();
    let sr = spec.sample_rate as f64;
    let mut samples = vec![0.0; len];
    synth::add_hum(&mut samples, sr, HUM_FREQ, HUM_AMP);
    let inst = spec.sounding()?;
    let burst_len = (BURST_SECONDS * sr).round() as usize;
    let partials = synth::noise_partials(inst.voice.freq, crate::rng::substream(spec.seed, TAG_NOISE_VOICE));
    for &f in event_times {
        let onset = (f as f64 * sr / spec.fps as f64).round() as usize;
        match inst.voice.kind {
            VoiceKind::Tone => {
                synth::add_tone_burst(&mut samples, sr, onset, burst_len, BURST_AMP, inst.voice.freq)
            }
            VoiceKind::Chirp => synth::add_mod_tone_burst(
                &mut samples,
                sr,
                onset,
                burst_len,
                BURST_AMP,
                inst.voice.freq,
            ),
            VoiceKind::NoiseBurst => {
                synth::add_partial_burst(&mut samples, sr, onset, burst_len, BURST_AMP, &partials)
            }
        }
    }
    synth::peak_limit(&mut samples, AUDIO_PEAK);
    Ok(AudioTrack { samples, sample_rate: spec.sample_rate })
}

/// Generate the full sample for a spec. Deterministic: the same spec yields
/// bit-identical output.
pub fn generate_scene(spec: &SceneSpec) -> Result<SceneSample> {
    spec.validate()?;
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    let event_times = scene_event_times(spec)?;
    let sounding_idx = spec.sounding_index()?;

    let tracks: Vec<Track> = spec
        .instances
        .iter()
        .map(|i| simulate_positions(&i.trajectory, i.radius, spec, t))
        .collect();

    let bg = background_frame(spec);
    let mut video = Tensor::zeros(&[t, h, w, 3]);
    let mut mask = InstanceMask::zeros(t, h, w);

    // Draw order: silent instances first, the sounding instance on top, so
    // its occupancy is exactly its visible footprint.
    let mut order: Vec<usize> = (0..spec.instances.len()).filter(|&i| i != sounding_idx).collect();
    order.push(sounding_idx);

    for f in 0..t {
        let flash = event_times.contains(&f);
        let frame = &mut video.data_mut()[f * h * w * 3..(f + 1) * h * w * 3];
        frame.copy_from_slice(&bg);
        for &i in &order {
            let inst = &spec.instances[i];
            let p = tracks[i].positions[f];
            let mut color = inst.color;
            if i == sounding_idx && flash {
                for c in &mut color {
                    *c += FLASH_GAIN * (1.0 - *c);
                }
            }
            let r = inst.radius;
            let (r0, r1) = (((p[1] - r).floor().max(0.0)) as usize, ((p[1] + r).ceil() as usize).min(h));
            let (c0, c1) = (((p[0] - r).floor().max(0.0)) as usize, ((p[0] + r).ceil() as usize).min(w));
            for row in r0..r1 {
                for col in c0..c1 {
                    let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
                    if covers(inst.shape, p, r, x, y) {
                        let px = (row * w + col) * 3;
                        frame[px..px + 3].copy_from_slice(&color);
                        if i == sounding_idx {
                            mask.frame_mut(f)[row * w + col] = 1.0;
                        }
                    }
                }
            }
        }
    }

    if mask.popcount() == 0 {
        return Err(CoreError::invalid("sounding instance never visible"));
    }

    Ok(SceneSample {
        video: VideoClip::new(video, spec.fps)?,
        audio: scene_audio(spec, &event_times)?,
        mask,
        descriptor: scene_descriptor(spec)?,
        event_times,
    })
}

/// Apply an edit descriptor to a spec, changing only the named attributes of
/// the sounding instance. Trajectory and removal tokens are rejected: edit
/// pairs share the seed-derived trajectory by contract.
pub fn apply_edit(spec: &SceneSpec, edit: &Descriptor) -> Result<SceneSpec> {
    let mut out = spec.clone();
    let idx = out.sounding_index()?;
    let min_dim = out.width.min(out.height) as f64;
    let frames = out.frames;
    let inst = &mut out.instances[idx];
    for tok in edit.tokens() {
        match *tok {
            Token::Shape(s) => inst.shape = s,
            Token::Color(c) => inst.color = PALETTE[c].1,
            Token::Size(s) => inst.radius = (s.radius_frac() * min_dim).max(1.5),
            Token::Voice(v) => inst.voice.kind = v,
            Token::Freq(f) => inst.voice.freq = f as f64,
            Token::Timing(TimingToken::Periodic(k)) => {
                inst.event_rule = EventRule::Periodic { every: k as usize }
            }
            Token::Timing(TimingToken::OnBounce) => inst.event_rule = EventRule::OnBounce,
            Token::Timing(TimingToken::OnFlash) => {
                // Keep explicit flash frames if the rule already has them;
                // otherwise reuse periodic-4 frames as the flash schedule.
                if !matches!(inst.event_rule, EventRule::OnFlash { .. }) {
                    let flash_frames = (0..frames).step_by(4).collect();
                    inst.event_rule = EventRule::OnFlash { frames: flash_frames };
                }
            }
            Token::Trajectory(_) => {
                return Err(CoreError::invalid(
                    "trajectory edits unsupported: pairs share the trajectory",
                ))
            }
            Token::Remove => {
                return Err(CoreError::invalid("remove edits have no paired target scene"))
            }
        }
    }
    Ok(out)
}

/// Build a source/target pair differing only in the edited attributes.
pub fn generate_edit_pair(spec: &SceneSpec, edit: &Descriptor, seed: u64) -> Result<EditPair> {
    let mut src_spec = spec.clone();
    src_spec.seed = seed;
    let tgt_spec = apply_edit(&src_spec, edit)?;
    let source = generate_scene(&src_spec)?;
    let target = generate_scene(&tgt_spec)?;
    Ok(EditPair { source, target, edited_descriptor: edit.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CoarseMode {
    Bbox,
    Blur(f64),
}

/// Coarsen a ground-truth mask the way a user-provided mask would look.
pub fn coarse_mask(mask: &InstanceMask, mode: CoarseMode) -> Result<InstanceMask> {
    if !mask.is_binary() {
        return Err(CoreError::invalid("coarse_mask wants a binary mask"));
    }
    match mode {
        CoarseMode::Bbox => Ok(mask.per_frame_bbox()),
        CoarseMode::Blur(p) => crate::refiner::degrade_mask(mask, p),
    }
}

// ---------------------------------------------------------------------------
// Dataset spec sampling
// ---------------------------------------------------------------------------

/// Shared knobs for sampling random scene specs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneProfile {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: u32,
    pub sample_rate: u32,
    pub sizes: Vec<SizeClass>,
    pub max_instances: usize,
}

impl Default for SceneProfile {
    /// Desk defaults: T=16 frames of 32x32 at 8 fps, 8 kHz audio.
    fn default() -> Self {
        SceneProfile {
            frames: 16,
            height: 32,
            width: 32,
            fps: 8,
            sample_rate: 8000,
            sizes: vec![SizeClass::Small, SizeClass::Medium, SizeClass::Large],
            max_instances: 3,
        }
    }
}

fn sample_instance(
    rng: &mut Stream,
    profile: &SceneProfile,
    sounding: bool,
    avoid_color: usize,
) -> InstanceSpec {
    let min_dim = profile.width.min(profile.height) as f64;
    let shape = [Shape::Circle, Shape::Square, Shape::Triangle][rng.index(3)];
    let mut color_idx = rng.index(PALETTE.len());
    while color_idx == avoid_color {
        color_idx = rng.index(PALETTE.len());
    }
    let size = profile.sizes[rng.index(profile.sizes.len())];
    let radius = (size.radius_frac() * min_dim).max(1.5);
    let speed = rng.uniform_in(0.045, 0.09) * min_dim;
    let angle = rng.uniform_in(0.0, std::f64::consts::TAU);
    let margin = radius + 0.5;
    let pos = [
        rng.uniform_in(margin, profile.width as f64 - margin),
        rng.uniform_in(margin, profile.height as f64 - margin),
    ];
    let trajectory = match rng.index(3) {
        0 => Trajectory::Bounce { pos, vel: [speed * angle.cos(), speed * angle.sin()] },
        1 => {
            let max_orbit = (profile.width.min(profile.height) as f64 / 2.0 - radius - 0.5).max(0.5);
            let orbit_radius = rng.uniform_in(0.3, 1.0) * max_orbit;
            Trajectory::Orbit {
                center: [profile.width as f64 / 2.0, profile.height as f64 / 2.0],
                orbit_radius,
                omega: rng.uniform_in(0.25, 0.55) * if rng.bool_with(0.5) { 1.0 } else { -1.0 },
                phase: rng.uniform_in(0.0, std::f64::consts::TAU),
            }
        }
        _ => {
            // Drift slow enough to stay inside for the whole clip.
            let t = profile.frames as f64;
            let vx = rng.uniform_in(-1.0, 1.0) * (profile.width as f64 - 2.0 * margin) / t * 0.45;
            let vy = rng.uniform_in(-1.0, 1.0) * (profile.height as f64 - 2.0 * margin) / t * 0.45;
            let pos = [
                rng.uniform_in(margin + vx.abs() * t, profile.width as f64 - margin - vx.abs() * t)
                    .clamp(margin, profile.width as f64 - margin),
                rng.uniform_in(margin + vy.abs() * t, profile.height as f64 - margin - vy.abs() * t)
                    .clamp(margin, profile.height as f64 - margin),
            ];
            Trajectory::Drift { pos, vel: [vx, vy] }
        }
    };
    let voice_kind = [VoiceKind::Tone, VoiceKind::Chirp, VoiceKind::NoiseBurst][rng.index(3)];
    let freq = FREQS[rng.index(FREQS.len())] as f64;
    let event_rule = if sounding {
        match (&trajectory, rng.index(3)) {
            (Trajectory::Bounce { .. }, 0) => EventRule::OnBounce,
            (_, 1) => {
                let n = 2 + rng.index(3);
                let mut frames: Vec<usize> =
                    (0..n).map(|_| rng.index(profile.frames)).collect();
                frames.sort_unstable();
                frames.dedup();
                EventRule::OnFlash { frames }
            }
            _ => EventRule::Periodic { every: PERIODS[rng.index(PERIODS.len())] as usize },
        }
    } else {
        EventRule::Periodic { every: 8 }
    };
    InstanceSpec {
        shape,
        color: PALETTE[color_idx].1,
        radius,
        trajectory,
        sounding,
        voice: Voice { kind: voice_kind, freq },
        event_rule,
    }
}

/// Sample a valid random scene spec; deterministic in `seed`.
pub fn sample_scene_spec(seed: u64, profile: &SceneProfile) -> Result<SceneSpec> {
    for attempt in 0..16u64 {
        let mut rng = Stream::new(seed, 0x5ce0 + attempt);
        let bg_idx = rng.index(PALETTE.len());
        let bg_shade = rng.uniform_in(0.15, 0.45);
        let bg_color = [
            PALETTE[bg_idx].1[0] * bg_shade,
            PALETTE[bg_idx].1[1] * bg_shade,
            PALETTE[bg_idx].1[2] * bg_shade,
        ];
        let n_extra = rng.index(profile.max_instances.clamp(1, 3));
        let mut instances = vec![sample_instance(&mut rng, profile, true, bg_idx)];
        for _ in 0..n_extra {
            instances.push(sample_instance(&mut rng, profile, false, bg_idx));
        }
        let spec = SceneSpec {
            seed,
            frames: profile.frames,
            height: profile.height,
            width: profile.width,
            fps: profile.fps,
            sample_rate: profile.sample_rate,
            instances,
            background: BackgroundSpec { color: bg_color, texture_amp: 0.03 },
        };
        if spec.validate().is_ok() && !scene_event_times(&spec)?.is_empty() {
            return Ok(spec);
        }
    }
    Err(CoreError::invalid(format!("could not sample a valid scene for seed {seed}")))
}

// ---------------------------------------------------------------------------
// Optional control-context rasters
// ---------------------------------------------------------------------------

/// Edge raster of every instance: boundary pixels drawn in the instance
/// colour over black.
pub fn scribble_raster(spec: &SceneSpec) -> Result<Tensor> {
    let sample = generate_scene(spec)?;
    let (t, h, w, _) = sample.video.dims();
    let mut out = Tensor::zeros(&[t, h, w, 3]);
    for inst in &spec.instances {
        let track = simulate_positions(&inst.trajectory, inst.radius, spec, t);
        for f in 0..t {
            let p = track.positions[f];
            for row in 0..h {
                for col in 0..w {
                    let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
                    if !covers(inst.shape, p, inst.radius, x, y) {
                        continue;
                    }
                    let boundary = [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)].iter().any(|(dr, dc)| {
                        let (nr, nc) = (row as i64 + dr, col as i64 + dc);
                        nr < 0
                            || nc < 0
                            || nr >= h as i64
                            || nc >= w as i64
                            || !covers(
                                inst.shape,
                                p,
                                inst.radius,
                                nc as f64 + 0.5,
                                nr as f64 + 0.5,
                            )
                    });
                    if boundary {
                        let px = ((f * h + row) * w + col) * 3;
                        out.data_mut()[px..px + 3].copy_from_slice(&inst.color);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Center-and-heading raster: a cross at each instance center plus a tick in
/// the motion direction.
pub fn pose_raster(spec: &SceneSpec) -> Result<Tensor> {
    spec.validate()?;
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    let mut out = Tensor::zeros(&[t, h, w, 3]);
    let put = |data: &mut [f64], f: usize, row: i64, col: i64, color: [f64; 3]| {
        if row >= 0 && col >= 0 && (row as usize) < h && (col as usize) < w {
            let px = ((f * h + row as usize) * w + col as usize) * 3;
            data[px..px + 3].copy_from_slice(&color);
        }
    };
    for inst in &spec.instances {
        let track = simulate_positions(&inst.trajectory, inst.radius, spec, t);
        for f in 0..t {
            let p = track.positions[f];
            let (r, c) = (p[1] as i64, p[0] as i64);
            let data = out.data_mut();
            for (dr, dc) in [(0i64, 0i64), (0, 1), (0, -1), (1, 0), (-1, 0)] {
                put(data, f, r + dr, c + dc, [1.0, 1.0, 1.0]);
            }
            let next = track.positions[(f + 1).min(t - 1)];
            let (dx, dy) = (next[0] - p[0], next[1] - p[1]);
            let norm = (dx * dx + dy * dy).sqrt();
            if norm > 1e-9 {
                for step in 1..=2i64 {
                    put(
                        data,
                        f,
                        r + (dy / norm * step as f64).round() as i64,
                        c + (dx / norm * step as f64).round() as i64,
                        inst.color,
                    );
                }
            }
        }
    }
    Ok(out)
}
