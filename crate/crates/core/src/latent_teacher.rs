//! Synthetic stand-in for a frozen latent encoder, plus the binary latent cache.
//!
//! Latents are sums of separable DCT-II cosine modes. Low-order modes use
//! per-axis indices `0..=⌊min(h,w)/4⌋` and are attenuated by
//! `1 / (1 + fx² + fy²)`; high-order modes use per-axis indices strictly
//! above `⌊n/2⌋`. One band carries a class-fixed signal, the other carries
//! per-instance content, selected by [`IdentityBand`].

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Amplitude of the class-identity signal.
pub const CLASS_AMPLITUDE: f64 = 1.0;
/// Amplitude of per-instance content.
pub const INSTANCE_AMPLITUDE: f64 = 0.5;

pub const CACHE_MAGIC: &[u8; 4] = b"SPLC";
pub const CACHE_VERSION: u32 = 1;

/// A `C×h×w` latent, stored channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    pub sample_id: String,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LatentTensor {
    pub fn new(
        sample_id: impl Into<String>,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Parameter(format!(
                "latent dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Parameter(format!(
                "latent {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("latent entries".into()));
        }
        Ok(LatentTensor {
            sample_id: sample_id.into(),
            channels,
            height,
            width,
            data,
        })
    }

    /// Same shape and id, new values. Values are trusted to be finite.
    pub(crate) fn with_data(&self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        LatentTensor {
            sample_id: self.sample_id.clone(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.height + i) * self.width + j]
    }

    /// Elementwise `self * factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        self.with_data(self.data.iter().map(|v| v * factor).collect())
    }
}

/// Which band carries class identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdentityBand {
    Low,
    High,
}

impl std::str::FromStr for IdentityBand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(IdentityBand::Low),
            "high" => Ok(IdentityBand::High),
            other => Err(Error::Config(format!("identity_band must be low|high, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for IdentityBand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IdentityBand::Low => "low",
            IdentityBand::High => "high",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// Low-order modes per class (or per instance when identity is high).
    pub base_modes: usize,
    /// High-order modes per instance (or per class when identity is high).
    pub detail_modes: usize,
    pub noise_std: f64,
    pub identity_band: IdentityBand,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 8,
            base_modes: 3,
            detail_modes: 3,
            noise_std: 0.05,
            identity_band: IdentityBand::Low,
            channels: 4,
            height: 16,
            width: 16,
            seed: 0,
        }
    }
}

/// A separable cosine mode with per-axis DCT indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Mode {
    pub fy: usize,
    pub fx: usize,
}

impl Mode {
    /// Unit-amplitude basis image `cos(π fy (i+½)/h) · cos(π fx (j+½)/w)`.
    pub fn basis(&self, height: usize, width: usize) -> Vec<f64> {
        let cy: Vec<f64> = (0..height)
            .map(|i| (PI * self.fy as f64 * (i as f64 + 0.5) / height as f64).cos())
            .collect();
        let cx: Vec<f64> = (0..width)
            .map(|j| (PI * self.fx as f64 * (j as f64 + 0.5) / width as f64).cos())
            .collect();
        cy.iter()
            .flat_map(|y| cx.iter().map(move |x| y * x))
            .collect()
    }

    fn rolloff(&self) -> f64 {
        1.0 / (1.0 + (self.fx * self.fx + self.fy * self.fy) as f64)
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Specification(m));
        if self.num_classes == 0 {
            return bad("num_classes must be ≥ 1".into());
        }
        if self.base_modes == 0 || self.detail_modes == 0 {
            return bad("base_modes and detail_modes must be ≥ 1".into());
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad(format!(
                "grid must be positive, got {}x{}x{}",
                self.channels, self.height, self.width
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be finite and ≥ 0, got {}", self.noise_std));
        }
        if self.high_modes().is_empty() {
            return bad(format!(
                "grid {}x{} has no high-order modes",
                self.height, self.width
            ));
        }
        let (need_low, need_high) = match self.identity_band {
            IdentityBand::Low => (self.base_modes, 0),
            IdentityBand::High => (0, self.detail_modes),
        };
        if need_low > self.low_modes().len() || need_high > self.high_modes().len() {
            return bad("more class modes requested than the band provides".into());
        }
        Ok(())
    }

    pub fn low_modes(&self) -> Vec<Mode> {
        let q = self.height.min(self.width) / 4;
        let mut out = Vec::new();
        for fy in 0..=q {
            for fx in 0..=q {
                out.push(Mode { fy, fx });
            }
        }
        out
    }

    pub fn high_modes(&self) -> Vec<Mode> {
        let mut out = Vec::new();
        for fy in self.height / 2 + 1..self.height {
            for fx in self.width / 2 + 1..self.width {
                out.push(Mode { fy, fx });
            }
        }
        out
    }
}

/// One cosine component: a mode and per-channel coefficients.
#[derive(Debug, Clone)]
struct Component {
    mode: Mode,
    coeffs: Vec<f64>,
}

fn draw_components<R: Rng>(
    rng: &mut R,
    pool: &[Mode],
    count: usize,
    channels: usize,
    amplitude: f64,
    low: bool,
    distinct: bool,
) -> Vec<Component> {
    let modes: Vec<Mode> = if distinct {
        pool.choose_multiple(rng, count).copied().collect()
    } else {
        (0..count).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    };
    modes
        .into_iter()
        .map(|mode| {
            let scale = amplitude * if low { mode.rolloff() } else { 1.0 };
            let coeffs = (0..channels).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
            Component { mode, coeffs }
        })
        .collect()
}

fn render(components: &[Component], channels: usize, h: usize, w: usize, out: &mut [f64]) {
    for comp in components {
        let basis = comp.mode.basis(h, w);
        for c in 0..channels {
            let dst = &mut out[c * h * w..(c + 1) * h * w];
            for (d, b) in dst.iter_mut().zip(&basis) {
                *d += comp.coeffs[c] * b;
            }
        }
    }
}

/// A labelled cached latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRecord {
    pub class_label: u32,
    pub latent: LatentTensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatentCache {
    pub records: Vec<LatentRecord>,
}

impl LatentCache {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorted distinct labels.
    pub fn labels(&self) -> Vec<u32> {
        let mut l: Vec<u32> = self.records.iter().map(|r| r.class_label).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    /// Checks unique ids and consistent shapes.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if !seen.insert(r.latent.sample_id.as_str()) {
                return Err(Error::Corruption {
                    record: i,
                    detail: format!("duplicate sample id `{}`", r.latent.sample_id),
                });
            }
        }
        Ok(())
    }
}

/// Generates `num_classes × n_per_class` latents, class-major.
pub fn generate_dataset(spec: &SyntheticSpec, n_per_class: usize) -> Result<LatentCache> {
    spec.validate()?;
    if n_per_class == 0 {
        return Err(Error::Specification("n_per_class must be ≥ 1".into()));
    }
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let low = spec.low_modes();
    let high = spec.high_modes();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let class_parts: Vec<Vec<Component>> = (0..spec.num_classes)
        .map(|_| match spec.identity_band {
            IdentityBand::Low => {
                draw_components(&mut rng, &low, spec.base_modes, c, CLASS_AMPLITUDE, true, true)
            }
            IdentityBand::High => draw_components(
                &mut rng,
                &high,
                spec.detail_modes,
                c,
                CLASS_AMPLITUDE,
                false,
                true,
            ),
        })
        .collect();

    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Specification(e.to_string()))?;
    let mut records = Vec::with_capacity(spec.num_classes * n_per_class);
    for (label, class_part) in class_parts.iter().enumerate() {
        for idx in 0..n_per_class {
            let instance = match spec.identity_band {
                IdentityBand::Low => draw_components(
                    &mut rng,
                    &high,
                    spec.detail_modes,
                    c,
                    INSTANCE_AMPLITUDE,
                    false,
                    false,
                ),
                IdentityBand::High => draw_components(
                    &mut rng,
                    &low,
                    spec.base_modes,
                    c,
                    INSTANCE_AMPLITUDE,
                    true,
                    false,
                ),
            };
            let mut data = vec![0.0; c * h * w];
            render(class_part, c, h, w, &mut data);
            render(&instance, c, h, w, &mut data);
            if spec.noise_std > 0.0 {
                for v in data.iter_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
            // Latents live at cache precision from the start.
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
            records.push(LatentRecord {
                class_label: label as u32,
                latent: LatentTensor::new(format!("c{label:03}-{idx:05}"), c, h, w, data)?,
            });
        }
    }
    Ok(LatentCache { records })
}

/// Serialized size in bytes of `cache`.
pub fn encoded_len(cache: &LatentCache) -> usize {
    12 + cache
        .records
        .iter()
        .map(|r| 2 + r.latent.sample_id.len() + 16 + 4 * r.latent.data.len())
        .sum::<usize>()
}

/// Encodes a cache; values are stored as little-endian `f32`.
pub fn encode_cache(cache: &LatentCache) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(encoded_len(cache));
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    let count = u32::try_from(cache.records.len())
        .map_err(|_| Error::Parameter("too many records".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for r in &cache.records {
        let id = r.latent.sample_id.as_bytes();
        let id_len = u16::try_from(id.len())
            .map_err(|_| Error::Parameter(format!("sample id too long: {} bytes", id.len())))?;
        buf.extend_from_slice(&id_len.to_le_bytes());
        buf.extend_from_slice(id);
        buf.extend_from_slice(&r.class_label.to_le_bytes());
        let (c, h, w) = r.latent.shape();
        for dim in [c, h, w] {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in &r.latent.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn write_cache(cache: &LatentCache, path: &Path) -> Result<()> {
    let bytes = encode_cache(cache)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Inverse of [`encode_cache`].
pub fn decode_cache(bytes: &[u8]) -> Result<LatentCache> {
    let mut rd = Reader { bytes, pos: 0 };
    let magic = rd
        .take(4)
        .ok_or_else(|| Error::Format("file shorter than magic".into()))?;
    if magic != CACHE_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = rd
        .u32()
        .ok_or_else(|| Error::Format("missing version".into()))?;
    if version != CACHE_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = rd
        .u32()
        .ok_or_else(|| Error::Format("missing record count".into()))? as usize;

    let mut records = Vec::with_capacity(count.min(1 << 16));
    for record in 0..count {
        let truncated = |what: &str| Error::Corruption {
            record,
            detail: format!("truncated in {what}"),
        };
        let id_len = rd.u16().ok_or_else(|| truncated("id length"))? as usize;
        let id_bytes = rd.take(id_len).ok_or_else(|| truncated("id"))?;
        let id = std::str::from_utf8(id_bytes)
            .map_err(|_| Error::Corruption {
                record,
                detail: "sample id is not UTF-8".into(),
            })?
            .to_string();
        let class_label = rd.u32().ok_or_else(|| truncated("class label"))?;
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            *d = rd.u32().ok_or_else(|| truncated("shape"))? as usize;
        }
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| Error::Corruption {
                record,
                detail: "shape overflow".into(),
            })?;
        let payload = rd
            .take(n.checked_mul(4).ok_or_else(|| truncated("payload"))?)
            .ok_or_else(|| truncated("payload"))?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let latent = LatentTensor::new(id, dims[0], dims[1], dims[2], data).map_err(|e| {
            Error::Corruption {
                record,
                detail: e.to_string(),
            }
        })?;
        records.push(LatentRecord {
            class_label,
            latent,
        });
    }
    if rd.pos != bytes.len() {
        return Err(Error::Corruption {
            record: count,
            detail: format!("{} trailing bytes", bytes.len() - rd.pos),
        });
    }
    let cache = LatentCache { records };
    cache.validate()?;
    Ok(cache)
}

pub fn read_cache(path: &Path) -> Result<LatentCache> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cache(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn low_projection(t: &LatentTensor, modes: &[Mode]) -> Vec<f64> {
        // DCT-II basis functions are orthogonal; project channel by channel.
        let (c, h, w) = t.shape();
        let mut out = Vec::new();
        for m in modes {
            let b = m.basis(h, w);
            let bb: f64 = b.iter().map(|x| x * x).sum();
            for ch in 0..c {
                let ip: f64 = t.channel(ch).iter().zip(&b).map(|(x, y)| x * y).sum();
                out.push(ip / bb);
            }
        }
        out
    }

    #[test]
    fn zero_noise_same_class_low_coefficients_match() {
        let spec = SyntheticSpec {
            noise_std: 0.0,
            ..SyntheticSpec::default()
        };
        let cache = generate_dataset(&spec, 2).unwrap();
        let low = spec.low_modes();
        let a = low_projection(&cache.records[0].latent, &low);
        let b = low_projection(&cache.records[1].latent, &low);
        assert_eq!(cache.records[0].class_label, cache.records[1].class_label);
        for (x, y) in a.iter().zip(&b) {
            // f32 storage bounds the agreement.
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn generation_is_seeded() {
        let spec = SyntheticSpec::default();
        assert_eq!(generate_dataset(&spec, 3).unwrap(), generate_dataset(&spec, 3).unwrap());
        let other = SyntheticSpec { seed: 1, ..spec };
        assert_ne!(generate_dataset(&spec, 3).unwrap(), generate_dataset(&other, 3).unwrap());
    }

    #[test]
    fn mode_sets_respect_band_limits() {
        let spec = SyntheticSpec::default();
        assert!(spec.low_modes().iter().all(|m| m.fx <= 4 && m.fy <= 4));
        assert!(spec.high_modes().iter().all(|m| m.fx > 8 && m.fy > 8));
    }

    #[test]
    fn rejects_bad_specs() {
        for spec in [
            SyntheticSpec { base_modes: 0, ..Default::default() },
            SyntheticSpec { height: 2, ..Default::default() },
            SyntheticSpec { num_classes: 0, ..Default::default() },
            SyntheticSpec { noise_std: -1.0, ..Default::default() },
        ] {
            assert!(matches!(generate_dataset(&spec, 1), Err(Error::Specification(_))));
        }
        assert!(generate_dataset(&SyntheticSpec::default(), 0).is_err());
    }

    #[test]
    fn empty_cache_is_header_only() {
        let bytes = encode_cache(&LatentCache::default()).unwrap();
        assert_eq!(bytes, b"SPLC\x01\x00\x00\x00\x00\x00\x00\x00");
    }

    #[test]
    fn single_record_layout() {
        let t = LatentTensor::new("a", 1, 2, 2, vec![1.0, -1.0, 2.0, -2.0]).unwrap();
        let cache = LatentCache {
            records: vec![LatentRecord { class_label: 3, latent: t }],
        };
        let bytes = encode_cache(&cache).unwrap();
        assert_eq!(bytes.len(), encoded_len(&cache));
        let header = 12 + 2 + 1 + 4 + 12;
        let payload = &bytes[header..];
        assert_eq!(payload.len(), 16);
        let vals: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        assert_eq!(vals, vec![1.0, -1.0, 2.0, -2.0]);
        assert_eq!(&bytes[12..14], &[1, 0]);
        assert_eq!(&bytes[15..19], &3u32.to_le_bytes());
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_cache(&LatentCache::default()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_cache(&bytes), Err(Error::Format(_))));
        let mut bytes = encode_cache(&LatentCache::default()).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode_cache(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_names_the_record() {
        let cache = generate_dataset(&SyntheticSpec::default(), 2).unwrap();
        let bytes = encode_cache(&cache).unwrap();
        let per = (bytes.len() - 12) / cache.len();
        for record in [0usize, 5, cache.len() - 1] {
            let cut = 12 + record * per + per / 2;
            match decode_cache(&bytes[..cut]) {
                Err(Error::Corruption { record: r, .. }) => assert_eq!(r, record),
                other => panic!("expected corruption, got {other:?}"),
            }
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let t = LatentTensor::new("x", 1, 1, 1, vec![0.0]).unwrap();
        let rec = LatentRecord { class_label: 0, latent: t };
        let cache = LatentCache { records: vec![rec.clone(), rec] };
        let bytes = encode_cache(&cache).unwrap();
        assert!(matches!(decode_cache(&bytes), Err(Error::Corruption { record: 1, .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.splc");
        let cache = generate_dataset(&SyntheticSpec::default(), 2).unwrap();
        write_cache(&cache, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, encoded_len(&cache));
        assert_eq!(read_cache(&path).unwrap(), cache);
        let missing = dir.path().join("nope");
        assert!(matches!(read_cache(&missing), Err(Error::Io { .. })));
    }
}
