//! Cross-module properties of the synthetic world: event-audio locking,
//! edit-pair conservation, and the spectral oracles for edited voices.

use avsync_core::audio::separate::band_rms;
use avsync_core::audio::separate::BandSpec;
use avsync_core::fft::{bin_freq, power_spectrum};
use avsync_core::metrics::{frame_shuffled_audio, rms_envelope, sync_proxy};
use avsync_core::rng::Stream;
use avsync_core::world::{
    coarse_mask, generate_edit_pair, generate_scene, sample_scene_spec, scene_event_times,
    CoarseMode, Descriptor, EventRule, InstanceSpec, SceneProfile, SceneSpec, Shape, Trajectory,
    Voice, VoiceKind,
};

fn profile() -> SceneProfile {
    SceneProfile::default()
}

#[test]
fn identical_specs_generate_bit_identical_samples() {
    let spec = sample_scene_spec(7, &profile()).unwrap();
    let a = generate_scene(&spec).unwrap();
    let b = generate_scene(&spec).unwrap();
    assert_eq!(a.video.data, b.video.data);
    assert_eq!(a.mask.data, b.mask.data);
    for (x, y) in a.audio.samples.iter().zip(&b.audio.samples) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    assert_eq!(a.event_times, b.event_times);
    assert_eq!(a.descriptor, b.descriptor);
}

#[test]
fn periodic_rule_fires_on_schedule() {
    let mut spec = sample_scene_spec(8, &profile()).unwrap();
    spec.frames = 32;
    let idx = spec.sounding_index().unwrap();
    spec.instances[idx].event_rule = EventRule::Periodic { every: 8 };
    let times = scene_event_times(&spec).unwrap();
    assert_eq!(times, vec![0, 8, 16, 24]);
}

#[test]
fn bounce_events_match_independent_reflection_walk() {
    // independent oracle: re-simulate the reflecting walk and log frames
    // where a velocity component flips sign
    let spec = SceneSpec {
        seed: 3,
        frames: 24,
        height: 32,
        width: 32,
        fps: 8,
        sample_rate: 8000,
        instances: vec![InstanceSpec {
            shape: Shape::Circle,
            color: [0.9, 0.2, 0.2],
            radius: 4.0,
            trajectory: Trajectory::Bounce { pos: [8.0, 9.0], vel: [2.3, 1.7] },
            sounding: true,
            voice: Voice { kind: VoiceKind::Tone, freq: 440.0 },
            event_rule: EventRule::OnBounce,
        }],
        background: avsync_core::world::BackgroundSpec { color: [0.1, 0.1, 0.2], texture_amp: 0.03 },
    };
    let times = scene_event_times(&spec).unwrap();

    let (mut p, mut v) = ([8.0f64, 9.0f64], [2.3f64, 1.7f64]);
    let r = 4.0;
    let mut oracle = Vec::new();
    for f in 1..24 {
        let before = v;
        for (axis, hi) in [(0usize, 32.0f64), (1usize, 32.0f64)] {
            let mut x: f64 = p[axis] + v[axis];
            if x < r {
                x = 2.0 * r - x;
                v[axis] = -v[axis];
            } else if x > hi - r {
                x = 2.0 * (hi - r) - x;
                v[axis] = -v[axis];
            }
            p[axis] = x;
        }
        if v[0] != before[0] || v[1] != before[1] {
            oracle.push(f);
        }
    }
    assert!(!oracle.is_empty(), "test trajectory should bounce");
    assert_eq!(times, oracle);
}

#[test]
fn audio_envelope_locks_to_event_times() {
    for seed in 0..6u64 {
        let spec = sample_scene_spec(100 + seed, &profile()).unwrap();
        let s = generate_scene(&spec).unwrap();
        let t = spec.frames;
        let env = rms_envelope(&s.audio, t);
        let mean = env.iter().sum::<f64>() / t as f64;
        let centered: Vec<f64> = env.iter().map(|e| e - mean).collect();
        let indicator: Vec<f64> = (0..t)
            .map(|f| if s.event_times.contains(&f) { 1.0 } else { 0.0 })
            .collect();
        let imean = indicator.iter().sum::<f64>() / t as f64;
        let icent: Vec<f64> = indicator.iter().map(|x| x - imean).collect();
        // cross-correlation at integer lags; the peak must sit at lag 0
        let xcorr = |lag: i64| -> f64 {
            let mut acc = 0.0;
            for f in 0..t as i64 {
                let g = f + lag;
                if g >= 0 && g < t as i64 {
                    acc += centered[f as usize] * icent[g as usize];
                }
            }
            acc
        };
        let at0 = xcorr(0);
        for lag in -4i64..=4 {
            if lag != 0 {
                assert!(
                    xcorr(lag) < at0,
                    "seed {seed}: correlation at lag {lag} >= lag 0"
                );
            }
        }
    }
}

#[test]
fn sync_proxy_is_high_on_ground_truth_and_low_on_shuffles() {
    let mut highs = Vec::new();
    let mut lows = Vec::new();
    for seed in 0..10u64 {
        let spec = sample_scene_spec(200 + seed, &profile()).unwrap();
        let s = generate_scene(&spec).unwrap();
        highs.push(sync_proxy(&s.video, &s.audio, &s.mask).unwrap());
        let mut rng = Stream::new(seed, 77);
        let mut acc = 0.0;
        for _ in 0..20 {
            let shuffled = frame_shuffled_audio(&s.audio, spec.frames, &mut rng);
            acc += sync_proxy(&s.video, &shuffled, &s.mask).unwrap();
        }
        lows.push(acc / 20.0);
    }
    let high_mean = highs.iter().sum::<f64>() / highs.len() as f64;
    let low_mean = lows.iter().map(|x| x.abs()).sum::<f64>() / lows.len() as f64;
    assert!(high_mean > 0.5, "gt sync proxy mean {high_mean} ({highs:?})");
    assert!(low_mean < 0.2, "shuffled sync proxy mean {low_mean}");
}

#[test]
fn edit_pairs_preserve_pixels_outside_the_mask_union() {
    for seed in 0..4u64 {
        let spec = sample_scene_spec(300 + seed, &profile()).unwrap();
        // shape edits change the mask but keep the bounding radius valid
        let edit = Descriptor::parse("shape:square color:white").unwrap();
        let pair = generate_edit_pair(&spec, &edit, 1000 + seed).unwrap();
        let (t, h, w, c) = pair.source.video.dims();
        let mut checked = 0usize;
        for f in 0..t {
            let (ms, mt) = (pair.source.mask.frame(f), pair.target.mask.frame(f));
            let (vs, vt) = (pair.source.video.frame(f), pair.target.video.frame(f));
            for p in 0..h * w {
                if ms[p] == 0.0 && mt[p] == 0.0 {
                    for ch in 0..c {
                        assert_eq!(
                            vs[p * c + ch].to_bits(),
                            vt[p * c + ch].to_bits(),
                            "seed {seed} frame {f} pixel {p}"
                        );
                    }
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }
}

#[test]
fn color_only_edit_keeps_the_exact_mask() {
    let spec = sample_scene_spec(9, &profile()).unwrap();
    let pair = generate_edit_pair(&spec, &Descriptor::parse("color:cyan").unwrap(), 9).unwrap();
    assert_eq!(pair.source.mask.data, pair.target.mask.data);
}

#[test]
fn empty_edit_is_the_identity() {
    let spec = sample_scene_spec(10, &profile()).unwrap();
    let pair = generate_edit_pair(&spec, &Descriptor::empty(), 10).unwrap();
    assert_eq!(pair.source.video.data, pair.target.video.data);
    for (a, b) in pair.source.audio.samples.iter().zip(&pair.target.audio.samples) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn voice_frequency_edit_moves_the_spectral_peak() {
    // 440 -> 880: the dominant DFT bin over a burst window must sit at 880
    let mut spec = sample_scene_spec(11, &profile()).unwrap();
    let idx = spec.sounding_index().unwrap();
    spec.instances[idx].voice = Voice { kind: VoiceKind::Tone, freq: 440.0 };
    spec.instances[idx].event_rule = EventRule::Periodic { every: 8 };
    let pair = generate_edit_pair(&spec, &Descriptor::parse("freq:880").unwrap(), 11).unwrap();

    let sr = pair.target.audio.sample_rate as f64;
    let onset = (pair.target.event_times[0] as f64 * sr / 8.0).round() as usize;
    let window = &pair.target.audio.samples[onset..onset + 640];
    let spec_pow = power_spectrum(window);
    // ignore the hum bins below 100 Hz
    let lo_bin = (100.0 / (sr / 640.0)) as usize;
    let peak = (lo_bin..spec_pow.len())
        .max_by(|&a, &b| spec_pow[a].total_cmp(&spec_pow[b]))
        .unwrap();
    let freq = bin_freq(peak, 640, sr);
    assert!(
        (freq - 880.0).abs() < sr / 640.0 * 2.0,
        "dominant frequency {freq} Hz, wanted ~880"
    );
    // and the old band is quiet in the target
    let old = band_rms(&pair.target.audio, BandSpec { lo: 400.0, hi: 490.0 });
    let new = band_rms(&pair.target.audio, BandSpec { lo: 800.0, hi: 975.0 });
    assert!(new > 10.0 * old, "new band rms {new} vs old {old}");
}

#[test]
fn bbox_coarse_mask_iou_matches_pixel_count_oracle() {
    let spec = sample_scene_spec(12, &profile()).unwrap();
    let s = generate_scene(&spec).unwrap();
    let bbox = coarse_mask(&s.mask, CoarseMode::Bbox).unwrap();
    // oracle: |mask| / |bbox| counted cell by cell (mask is inside its bbox)
    let (mask_px, bbox_px) = (s.mask.popcount(), bbox.popcount());
    let got = avsync_core::metrics::iou(&bbox, &s.mask).unwrap();
    assert!((got - mask_px as f64 / bbox_px as f64).abs() < 1e-12);
}

#[test]
fn size_edit_that_breaks_the_trajectory_is_rejected_with_context() {
    // growing the radius can push an orbit/drift instance out of frame; the
    // target scene must then be rejected, naming the offending instance
    let mut found = false;
    for seed in 300..330u64 {
        let spec = sample_scene_spec(seed, &profile()).unwrap();
        let edit = Descriptor::parse("size:large").unwrap();
        match generate_edit_pair(&spec, &edit, seed) {
            Ok(pair) => {
                // when it fits, masks may differ but conservation still holds
                assert_eq!(pair.source.video.dims(), pair.target.video.dims());
            }
            Err(e) => {
                assert!(e.to_string().contains("instance"), "{e}");
                found = true;
            }
        }
    }
    assert!(found, "expected at least one rejected size edit in the sweep");
}

#[test]
fn invalid_specs_are_rejected_with_context() {
    let mut spec = sample_scene_spec(13, &profile()).unwrap();
    let idx = spec.sounding_index().unwrap();
    // drift straight out of frame
    spec.instances[idx].trajectory = Trajectory::Drift { pos: [16.0, 16.0], vel: [3.0, 0.0] };
    let err = generate_scene(&spec).unwrap_err();
    assert!(err.to_string().contains(&format!("instance {idx}")), "{err}");

    let mut spec2 = sample_scene_spec(14, &profile()).unwrap();
    let idx2 = spec2.sounding_index().unwrap();
    spec2.instances[idx2].voice.freq = 6000.0; // above Nyquist
    assert!(generate_scene(&spec2).is_err());

    let mut spec3 = sample_scene_spec(15, &profile()).unwrap();
    spec3.instances.clear();
    assert!(spec3.validate().is_err());
}
