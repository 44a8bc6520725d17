use proptest::prelude::*;
use tpdm_core::audio::AudioClip;
use tpdm_core::pitch::*;

fn sine(freq: f64, amp: f64, sr: u32, len: usize) -> AudioClip {
    let samples = (0..len)
        .map(|n| (amp * (2.0 * std::f64::consts::PI * freq * n as f64 / sr as f64).sin()) as f32)
        .collect();
    AudioClip::new(samples, sr)
}

/// Frames whose analysis span lies fully inside the clip.
fn interior(track: &F0Track, len: usize) -> std::ops::Range<usize> {
    let hop = track.hop_samples;
    let reach = track.frame_window_samples;
    let first = reach.div_ceil(hop);
    let last = (len.saturating_sub(reach)) / hop;
    first..last.max(first)
}

#[test]
fn a4_sine_at_minus_6_dbfs() {
    let amp = 10f64.powf(-6.0 / 20.0);
    for sr in [16_000, 44_100] {
        let clip = sine(440.0, amp, sr, sr as usize);
        let track = estimate_f0(&clip, &F0Params::default()).unwrap();
        assert_eq!(track.len(), clip.len().div_ceil(512));
        for t in interior(&track, clip.len()) {
            let f = track.f0_hz[t];
            assert!((f - 440.0).abs() / 440.0 < 0.01, "sr {sr} frame {t}: {f}");
            assert!(track.confidence[t] > 0.8);
        }
    }
}

#[test]
fn middle_c_sine() {
    let clip = sine(261.63, 0.5, 16_000, 16_000);
    let track = estimate_f0(&clip, &F0Params::default()).unwrap();
    for t in interior(&track, clip.len()) {
        assert!((track.f0_hz[t] - 261.63).abs() / 261.63 < 0.01, "frame {t}: {}", track.f0_hz[t]);
    }
}

#[test]
fn silence_is_unvoiced() {
    let clip = AudioClip::silence(8192, 16_000);
    let track = estimate_f0(&clip, &F0Params::default()).unwrap();
    assert_eq!(track.len(), 16);
    assert!(track.f0_hz.iter().all(|&f| f == 0.0));
    assert!(track.confidence.iter().all(|&c| c == 0.0));
}

#[test]
fn short_clip_rejected() {
    let clip = AudioClip::silence(2047, 16_000);
    assert_eq!(
        estimate_f0(&clip, &F0Params::default()),
        Err(PitchError::ClipTooShort { len: 2047, window: 2048 })
    );
}

#[test]
fn every_table_pitch_recovered_from_a_sine() {
    for sr in [16_000u32, 44_100] {
        for idx in 1..=36 {
            let f0 = f0_of(idx).unwrap();
            let clip = sine(f0, 0.5, sr, 8192);
            let track = pitch_track(&clip, &F0Params::default()).unwrap();
            let voiced: Vec<usize> = track.indices.iter().copied().filter(|&i| i != 0).collect();
            let hits = voiced.iter().filter(|&&i| i == idx).count();
            assert!(!voiced.is_empty());
            assert!(hits as f64 >= 0.95 * voiced.len() as f64, "sr {sr} index {idx}: {:?}", track.indices);
        }
    }
}

#[test]
fn table_frequencies_round_trip() {
    for e in &PITCH_TABLE {
        assert_eq!(tokenize_f0(e.f0).unwrap(), e.index);
        assert_eq!(index_of(e.name), Some(e.index));
    }
}

#[test]
fn cents_tie_goes_low() {
    // Geometric midpoint of A4 and A#4.
    let mid = (440.0f64 * 466.16).sqrt();
    assert_eq!(tokenize_f0(mid).unwrap(), 10);
}

proptest! {
    #[test]
    fn tokenizer_is_monotone(a in 1.0f64..5000.0, b in 1.0f64..5000.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(tokenize_f0(lo).unwrap() <= tokenize_f0(hi).unwrap());
    }

    #[test]
    fn tokens_in_range(f in 0.0f64..1e6) {
        prop_assert!(tokenize_f0(f).unwrap() <= 36);
        let idx = tokenize_f0_with(f, OutOfRange::Unvoiced).unwrap();
        prop_assert!(idx <= 36);
    }

    #[test]
    fn track_length_is_ceil(len in 2048usize..20_000, hop in 64usize..1024) {
        let clip = AudioClip::silence(len, 16_000);
        let params = F0Params { hop_samples: hop, ..F0Params::default() };
        let track = estimate_f0(&clip, &params).unwrap();
        prop_assert_eq!(track.len(), len.div_ceil(hop));
    }
}
