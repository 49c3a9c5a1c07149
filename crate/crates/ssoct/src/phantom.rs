//! Synthetic layered-scatterer phantoms.
//!
//! Each phantom is a B-scan interferogram built per A-line as
//!
//! ```text
//! s(k) = G(k) * sum_j r_j cos(2*pi * z_j * k / N_k + phi_j) + noise
//! ```
//!
//! where `G` is a Gaussian source envelope, the `z_j` are reflector pixel
//! depths (layer boundaries undulating across the scan plus random
//! scatterers), and the paired reference image is the reconstruction of
//! the noise-free frame.
//!
//! Randomness comes from ChaCha8 streams: A-line `i` draws from stream `i`
//! of the configured seed, so serial and per-line-parallel generation agree
//! bit for bit. Phantom-wide draws (boundary undulation parameters) use a
//! reserved stream.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::acquisition::{reconstruct_reference, OctImage};
use crate::error::{Error, Result};

/// Stream index reserved for phantom-wide draws; A-lines use their own index.
const PHANTOM_STREAM: u64 = u64::MAX;

/// Fraction of `roughness` applied as per-line white jitter on top of the
/// smooth boundary undulation.
const WHITE_JITTER_FRACTION: f64 = 0.25;

/// One tissue layer boundary: depth as a fraction of the usable half-depth,
/// reflectivity of the boundary, and undulation amplitude in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub depth_fraction: f64,
    pub reflectivity: f64,
    pub roughness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    /// Spectral samples per A-line; must be a power of two.
    pub n_k: usize,
    /// A-lines per B-scan.
    pub w_lines: usize,
    pub layers: Vec<Layer>,
    /// Expected random scatterers per A-line.
    pub scatterer_density: f64,
    /// Gaussian source envelope FWHM as a fraction of the bandwidth, in
    /// (0, 1]. The maximum value 1.0 disables the taper (flat source).
    pub source_fwhm_fraction: f64,
    /// Standard deviation of additive Gaussian noise on the interferogram.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            n_k: 1024,
            w_lines: 256,
            layers: vec![
                Layer { depth_fraction: 0.18, reflectivity: 0.90, roughness: 3.0 },
                Layer { depth_fraction: 0.42, reflectivity: 0.55, roughness: 5.0 },
                Layer { depth_fraction: 0.68, reflectivity: 0.35, roughness: 4.0 },
            ],
            scatterer_density: 6.0,
            source_fwhm_fraction: 0.8,
            noise_sigma: 0.01,
            seed: 7,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.n_k.is_power_of_two() || self.n_k < 8 {
            return Err(Error::InvalidConfig(format!(
                "n_k must be a power of two >= 8, got {}",
                self.n_k
            )));
        }
        if self.w_lines == 0 {
            return Err(Error::InvalidConfig("w_lines must be >= 1".into()));
        }
        let mut prev = 0.0;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.depth_fraction <= prev || layer.depth_fraction >= 1.0 {
                return Err(Error::InvalidConfig(format!(
                    "layer {} depth_fraction {} must be strictly increasing within (0, 1) \
                     of the usable half-depth (aliasing guard)",
                    i, layer.depth_fraction
                )));
            }
            prev = layer.depth_fraction;
            if layer.reflectivity <= 0.0 || layer.reflectivity > 1.0 {
                return Err(Error::InvalidConfig(format!(
                    "layer {} reflectivity {} must lie in (0, 1]",
                    i, layer.reflectivity
                )));
            }
            if layer.roughness < 0.0 {
                return Err(Error::InvalidConfig("roughness must be >= 0".into()));
            }
        }
        if self.scatterer_density < 0.0 {
            return Err(Error::InvalidConfig("scatterer_density must be >= 0".into()));
        }
        if self.source_fwhm_fraction <= 0.0 || self.source_fwhm_fraction > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "source_fwhm_fraction {} must lie in (0, 1]",
                self.source_fwhm_fraction
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Metadata attached to a frame in memory; the container file carries none.
#[derive(Debug, Clone, PartialEq)]
pub enum FrameMeta {
    Phantom(PhantomConfig),
    Unspecified,
}

/// A raw background-subtracted B-scan interferogram: `w_lines` A-lines of
/// `n_k` spectral samples each, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFrame {
    pub w_lines: usize,
    pub n_k: usize,
    samples: Vec<f64>,
    pub meta: FrameMeta,
}

impl SpectralFrame {
    pub fn new(w_lines: usize, n_k: usize, samples: Vec<f64>, meta: FrameMeta) -> Result<Self> {
        if w_lines == 0 || n_k == 0 || samples.len() != w_lines * n_k {
            return Err(Error::shape(
                "spectral_frame",
                format!("{} lines x {} samples vs {} values", w_lines, n_k, samples.len()),
            ));
        }
        if !samples.iter().all(|v| v.is_finite()) {
            return Err(Error::arg("spectral_frame", "samples must be finite"));
        }
        Ok(SpectralFrame { w_lines, n_k, samples, meta })
    }

    pub fn line(&self, i: usize) -> &[f64] {
        &self.samples[i * self.n_k..(i + 1) * self.n_k]
    }

    pub fn line_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.samples[i * self.n_k..(i + 1) * self.n_k]
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }
}

struct BoundaryShape {
    amplitude: f64,
    cycles: f64,
    phase: f64,
}

/// Generates a phantom: the (noisy) acquired interferogram plus the
/// reference image reconstructed from the noise-free frame. Deterministic
/// for a fixed config.
pub fn generate_phantom(config: &PhantomConfig) -> Result<(SpectralFrame, OctImage)> {
    config.validate()?;
    let n_k = config.n_k;
    let w = config.w_lines;
    let half = n_k / 2;

    // Phantom-wide smooth undulation parameters, one set per layer.
    let mut prng = ChaCha8Rng::seed_from_u64(config.seed);
    prng.set_stream(PHANTOM_STREAM);
    let shapes: Vec<BoundaryShape> = config
        .layers
        .iter()
        .map(|layer| BoundaryShape {
            amplitude: layer.roughness * prng.gen_range(0.5..1.0),
            cycles: prng.gen_range(1.0..4.0),
            phase: prng.gen_range(0.0..std::f64::consts::TAU),
        })
        .collect();

    let envelope = source_envelope(n_k, config.source_fwhm_fraction);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut clean = vec![0.0f64; w * n_k];
    let mut noisy = vec![0.0f64; w * n_k];
    for line in 0..w {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(line as u64);

        // Reflectors: layer boundaries first, then scatterers.
        let mut reflectors: Vec<(f64, f64, f64)> = Vec::new(); // (z, r, phi)
        for (layer, shape) in config.layers.iter().zip(&shapes) {
            let white = normal.sample(&mut rng);
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let undulation = shape.amplitude
                * (std::f64::consts::TAU * shape.cycles * line as f64 / w as f64 + shape.phase)
                    .sin();
            let z = layer.depth_fraction * half as f64
                + undulation
                + WHITE_JITTER_FRACTION * layer.roughness * white;
            let z = z.clamp(0.0, (half - 1) as f64);
            reflectors.push((z, layer.reflectivity, phi));
        }
        if config.scatterer_density > 0.0 {
            let poisson = Poisson::new(config.scatterer_density)
                .map_err(|e| Error::InvalidConfig(format!("scatterer_density: {}", e)))?;
            let count = poisson.sample(&mut rng) as usize;
            for _ in 0..count {
                let z = rng.gen_range(0.0..(half as f64 * 0.98));
                let r = rng.gen_range(0.02..0.25);
                let phi = rng.gen_range(0.0..std::f64::consts::TAU);
                reflectors.push((z, r, phi));
            }
        }

        let row_clean = &mut clean[line * n_k..(line + 1) * n_k];
        for (k, value) in row_clean.iter_mut().enumerate() {
            let mut acc = 0.0;
            for &(z, r, phi) in &reflectors {
                acc += r * (std::f64::consts::TAU * z * k as f64 / n_k as f64 + phi).cos();
            }
            *value = envelope[k] * acc;
        }
        let row_noisy = &mut noisy[line * n_k..(line + 1) * n_k];
        for (k, value) in row_noisy.iter_mut().enumerate() {
            let noise =
                if config.noise_sigma > 0.0 { config.noise_sigma * normal.sample(&mut rng) } else { 0.0 };
            *value = clean[line * n_k + k] + noise;
        }
    }

    let clean_frame = SpectralFrame::new(w, n_k, clean, FrameMeta::Phantom(config.clone()))?;
    let reference = reconstruct_reference(&clean_frame, false)?;
    let frame = SpectralFrame::new(w, n_k, noisy, FrameMeta::Phantom(config.clone()))?;
    Ok((frame, reference))
}

fn source_envelope(n_k: usize, fwhm_fraction: f64) -> Vec<f64> {
    if fwhm_fraction >= 1.0 {
        return vec![1.0; n_k];
    }
    let center = (n_k as f64 - 1.0) / 2.0;
    let fwhm = fwhm_fraction * n_k as f64;
    let four_ln2 = 4.0 * std::f64::consts::LN_2;
    (0..n_k)
        .map(|k| {
            let t = (k as f64 - center) / fwhm;
            (-four_ln2 * t * t).exp()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Spectrum container file ("OCSP")
// ---------------------------------------------------------------------------

const SPECTRUM_MAGIC: &[u8; 4] = b"OCSP";

/// Writes the frame as magic "OCSP", three u32 LE (w_lines, n_k, reserved=0),
/// then `w_lines * n_k` f32 LE samples, row-major.
pub fn write_spectrum(path: &Path, frame: &SpectralFrame) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(SPECTRUM_MAGIC)?;
    out.write_all(&(frame.w_lines as u32).to_le_bytes())?;
    out.write_all(&(frame.n_k as u32).to_le_bytes())?;
    out.write_all(&0u32.to_le_bytes())?;
    for &v in frame.samples() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_spectrum(path: &Path) -> Result<SpectralFrame> {
    let mut input = BufReader::new(File::open(path)?);
    let mut header = [0u8; 16];
    input.read_exact(&mut header).map_err(|_| Error::Format {
        path: path.display().to_string(),
        detail: "truncated header".into(),
    })?;
    if &header[0..4] != SPECTRUM_MAGIC {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!("bad magic {:?}, expected \"OCSP\"", &header[0..4]),
        });
    }
    let w_lines = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let n_k = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let n = w_lines
        .checked_mul(n_k)
        .ok_or_else(|| Error::Format { path: path.display().to_string(), detail: "size overflow".into() })?;
    let mut bytes = vec![0u8; n * 4];
    input.read_exact(&mut bytes).map_err(|_| Error::Format {
        path: path.display().to_string(),
        detail: "truncated payload".into(),
    })?;
    let samples: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    SpectralFrame::new(w_lines, n_k, samples, FrameMeta::Unspecified)
}

/// Conventional path of the paired reference image for a spectrum file:
/// `phantom_000.ocsp -> phantom_000.ref.ocim`.
pub fn reference_path_for(spectrum_path: &Path) -> PathBuf {
    spectrum_path.with_extension("ref.ocim")
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub split: Split,
}

/// Resolves an entry path against the manifest's directory.
pub fn resolve_entry_path(manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
    let p = Path::new(&entry.path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or_else(|| Path::new(".")).join(p)
    }
}

/// Writes a JSON manifest after checking that every referenced spectrum
/// exists and no path repeats.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for entry in entries {
        if !seen.insert(entry.path.clone()) {
            return Err(Error::Manifest(format!("duplicate entry: {}", entry.path)));
        }
        let resolved = resolve_entry_path(path, entry);
        if !resolved.is_file() {
            return Err(Error::Manifest(format!("missing file: {}", resolved.display())));
        }
    }
    let file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(file, entries)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = BufReader::new(File::open(path)?);
    let entries: Vec<ManifestEntry> = serde_json::from_reader(file)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft;

    fn flat_single_reflector(depth_fraction: f64) -> PhantomConfig {
        PhantomConfig {
            n_k: 1024,
            w_lines: 8,
            layers: vec![Layer { depth_fraction, reflectivity: 1.0, roughness: 0.0 }],
            scatterer_density: 0.0,
            source_fwhm_fraction: 1.0,
            noise_sigma: 0.0,
            seed: 42,
        }
    }

    #[test]
    fn empty_phantom_gives_zero_reference() {
        let cfg = PhantomConfig {
            layers: vec![],
            scatterer_density: 0.0,
            noise_sigma: 0.0,
            n_k: 256,
            w_lines: 16,
            ..PhantomConfig::default()
        };
        let (frame, reference) = generate_phantom(&cfg).unwrap();
        assert!(frame.samples().iter().all(|&v| v == 0.0));
        assert!(reference.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_reflector_peaks_at_expected_pixel() {
        let d = 0.5;
        let cfg = flat_single_reflector(d);
        let (_, reference) = generate_phantom(&cfg).unwrap();
        let expected_row = (d * (cfg.n_k / 2) as f64).round() as usize;
        for col in 0..cfg.w_lines {
            let mut best = (0usize, f64::MIN);
            for row in 0..reference.height() {
                let v = reference.get(row, col);
                if v > best.1 {
                    best = (row, v);
                }
            }
            assert_eq!(best.0, expected_row, "column {}", col);
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let cfg = PhantomConfig { n_k: 256, w_lines: 32, ..PhantomConfig::default() };
        let (f1, r1) = generate_phantom(&cfg).unwrap();
        let (f2, r2) = generate_phantom(&cfg).unwrap();
        assert_eq!(f1.samples(), f2.samples());
        assert_eq!(r1.pixels(), r2.pixels());
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = PhantomConfig { n_k: 256, w_lines: 8, ..PhantomConfig::default() };
        let other = PhantomConfig { seed: cfg.seed + 1, ..cfg.clone() };
        let (f1, _) = generate_phantom(&cfg).unwrap();
        let (f2, _) = generate_phantom(&other).unwrap();
        assert_ne!(f1.samples(), f2.samples());
    }

    #[test]
    fn parseval_energy_ratio_holds_per_line() {
        let cfg = PhantomConfig { n_k: 512, w_lines: 4, ..PhantomConfig::default() };
        let (frame, _) = generate_phantom(&cfg).unwrap();
        for line in 0..frame.w_lines {
            let row = frame.line(line);
            let spectrum_energy: f64 = row.iter().map(|v| v * v).sum();
            let inv = fft::inverse_dft(row);
            let image_energy: f64 = inv.iter().map(|c| c.norm_sqr()).sum();
            let rel = (spectrum_energy - frame.n_k as f64 * image_energy).abs()
                / spectrum_energy.max(1e-300);
            assert!(rel < 1e-6, "line {} parseval rel {}", line, rel);
        }
    }

    #[test]
    fn doubling_reflectivity_doubles_normalized_peak() {
        // Anchor layer pins the normalization max; the probe layer sits at
        // an exact DFT bin so there is no leakage between the two.
        let probe = |r: f64| {
            let cfg = PhantomConfig {
                n_k: 1024,
                w_lines: 4,
                layers: vec![
                    Layer { depth_fraction: 0.25, reflectivity: 0.9, roughness: 0.0 },
                    Layer { depth_fraction: 0.5, reflectivity: r, roughness: 0.0 },
                ],
                scatterer_density: 0.0,
                source_fwhm_fraction: 1.0,
                noise_sigma: 0.0,
                seed: 5,
            };
            let (_, reference) = generate_phantom(&cfg).unwrap();
            let row = (0.5 * 512.0) as usize;
            reference.get(row, 0)
        };
        let low = probe(0.2);
        let high = probe(0.4);
        assert!(((high / low) - 2.0).abs() < 1e-6, "ratio {}", high / low);
    }

    #[test]
    fn config_validation_rejects_bad_layers() {
        let mut cfg = PhantomConfig::default();
        cfg.layers[1].depth_fraction = cfg.layers[0].depth_fraction;
        assert!(cfg.validate().is_err());
        let mut cfg = PhantomConfig::default();
        cfg.layers[0].depth_fraction = 1.2;
        assert!(cfg.validate().is_err());
        let mut cfg = PhantomConfig::default();
        cfg.layers[0].reflectivity = 0.0;
        assert!(cfg.validate().is_err());
        let cfg = PhantomConfig { n_k: 300, ..PhantomConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn spectrum_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.ocsp");
        let cfg = PhantomConfig { n_k: 128, w_lines: 8, ..PhantomConfig::default() };
        let (frame, _) = generate_phantom(&cfg).unwrap();
        write_spectrum(&path, &frame).unwrap();
        let loaded = read_spectrum(&path).unwrap();
        assert_eq!(loaded.w_lines, frame.w_lines);
        assert_eq!(loaded.n_k, frame.n_k);
        // Values round-trip through f32.
        for (a, b) in loaded.samples().iter().zip(frame.samples()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn spectrum_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.ocsp");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(read_spectrum(&path).is_err());
    }

    #[test]
    fn manifest_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.json");

        // Empty manifest round-trips.
        write_manifest(&manifest, &[]).unwrap();
        assert!(read_manifest(&manifest).unwrap().is_empty());

        let cfg = PhantomConfig { n_k: 64, w_lines: 4, ..PhantomConfig::default() };
        let (frame, _) = generate_phantom(&cfg).unwrap();
        let mut entries = Vec::new();
        for (i, split) in [Split::Train, Split::Val, Split::Test].iter().enumerate() {
            let name = format!("p{}.ocsp", i);
            write_spectrum(&dir.path().join(&name), &frame).unwrap();
            entries.push(ManifestEntry { path: name, split: *split });
        }
        write_manifest(&manifest, &entries).unwrap();
        assert_eq!(read_manifest(&manifest).unwrap(), entries);

        // Duplicate path rejected.
        let mut dup = entries.clone();
        dup.push(entries[0].clone());
        assert!(write_manifest(&manifest, &dup).is_err());

        // Missing file rejected.
        let missing =
            vec![ManifestEntry { path: "does_not_exist.ocsp".into(), split: Split::Train }];
        assert!(write_manifest(&manifest, &missing).is_err());
    }

    #[test]
    fn reference_path_convention() {
        assert_eq!(
            reference_path_for(Path::new("/x/phantom_000.ocsp")),
            PathBuf::from("/x/phantom_000.ref.ocim")
        );
    }
}
