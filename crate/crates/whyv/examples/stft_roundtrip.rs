//! STFT analysis/synthesis round trip: transform a random waveform with
//! every supported window geometry and report the reconstruction error.
//!
//!     cargo run --release --example stft_roundtrip

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use whyv::dsp::{istft, stft, StftConfig, Waveform};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples: Vec<f64> = (0..24000).map(|_| rng.gen_range(-0.9..0.9)).collect();
    let wave = Waveform::new(samples, 8000).unwrap();
    println!("input: {} samples at {} Hz", wave.len(), wave.sample_rate());

    for n_fft in [128usize, 256] {
        for hop in [n_fft / 2, n_fft / 4] {
            let cfg = StftConfig::sqrt_hann(n_fft, hop).unwrap();
            let spec = stft(&wave, &cfg).unwrap();
            let back = istft(&spec).unwrap();
            let err = wave
                .samples()
                .iter()
                .zip(back.samples())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            println!(
                "n_fft={n_fft:3} hop={hop:3}: {} frames x {} bins, cola_dev={:.2e}, max_abs_err={err:.2e}",
                spec.frames(),
                spec.bins(),
                cfg.cola_deviation(),
            );
        }
    }
}
