//! Persistence, synthetic ground-truth scenes and PCA export.
//!
//! Every binary format is little-endian, opens with a 4-byte magic and a `u32`
//! version, and ends in a 64-bit FNV-1a checksum of all preceding bytes. Loaders
//! parse and verify the whole file before building any value, so a rejected
//! file never leaves partial state behind. Layouts are documented in
//! `docs/FORMATS.md`.

pub mod binio;
pub mod dataset;
pub mod export;
pub mod synth;

use std::fs;
use std::path::Path;

use crate::decoder::{Layer, Mlp};
use crate::error::{Error, Result};
use crate::geometry::Bounds;
use crate::grid::{GridConfig, LatentGrid, StorageMode};
use crate::token::{AggregatorWeights, PosEncConfig};

pub use binio::Precision;
use binio::{Reader, Writer};

pub const MAP_MAGIC: &[u8; 4] = b"LMAP";
pub const DECODER_MAGIC: &[u8; 4] = b"LMDC";
pub const AGGREGATOR_MAGIC: &[u8; 4] = b"LMAG";
pub const TOKEN_MAGIC: &[u8; 4] = b"LMTK";
pub const FORMAT_VERSION: u32 = 1;

/// A latent grid together with the decoder that reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMap {
    pub grid: LatentGrid,
    pub decoder: Mlp,
}

impl LatentMap {
    pub fn new(grid: LatentGrid, decoder: Mlp) -> Result<Self> {
        if decoder.in_dim() != grid.encoded_dim() {
            return Err(Error::DimensionMismatch {
                what: "decoder input",
                expected: grid.encoded_dim(),
                got: decoder.in_dim(),
            });
        }
        Ok(LatentMap { grid, decoder })
    }

    /// Decoded embedding at `x`.
    pub fn query(&self, x: &[f64; 3]) -> Result<Vec<f64>> {
        self.decoder.decode(&self.grid.encode(x)?)
    }

    pub fn to_bytes(&self, precision: Precision) -> Vec<u8> {
        let mut w = Writer::new();
        write_map_body(&mut w, &self.grid, &self.decoder, precision);
        w.finish_with_checksum()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "map file");
        r.magic(MAP_MAGIC)?;
        r.version(FORMAT_VERSION)?;
        let precision = r.precision()?;
        let config = read_grid_config(&mut r)?;
        let layouts = config.layouts().map_err(|e| r.malformed(e.to_string()))?;
        let c = config.feature_dim;
        let mut payloads = Vec::with_capacity(layouts.len());
        for (l, layout) in layouts.iter().enumerate() {
            let at = r.offset();
            let mode = match r.u8()? {
                0 => StorageMode::Dense,
                1 => StorageMode::Hashed,
                t => return Err(malformed_at(at, format!("level {l}: unknown storage mode {t}"))),
            };
            let at = r.offset();
            let slots = r.u64()?;
            if mode != layout.mode || slots != layout.slots as u64 {
                return Err(malformed_at(
                    at,
                    format!(
                        "level {l}: stored {mode:?} with {slots} slots, config implies {:?} with {}",
                        layout.mode, layout.slots
                    ),
                ));
            }
            payloads.push(r.floats(slots.saturating_mul(c as u64), precision)?);
        }
        let at = r.offset();
        let n = r.u64()?;
        let n = r.ensure(n, 12)?;
        let mut occupancy = Vec::with_capacity(n);
        for _ in 0..n {
            occupancy.push([r.u32()?, r.u32()?, r.u32()?]);
        }
        if occupancy.windows(2).any(|w| w[0] >= w[1]) {
            return Err(malformed_at(at, "occupancy list is not strictly sorted".into()));
        }
        let layers = read_decoder_block(&mut r)?;
        r.checksum()?;

        // Everything is parsed and verified; only now build values.
        let mut grid = LatentGrid::zeros(config).map_err(|e| malformed_at(0, e.to_string()))?;
        for (level, payload) in grid.params_mut().into_iter().zip(payloads) {
            level.copy_from_slice(&payload);
        }
        for coord in occupancy {
            grid.insert_occupied(coord)
                .map_err(|e| malformed_at(at, e.to_string()))?;
        }
        let decoder = Mlp::from_layers(layers).map_err(|e| malformed_at(0, e.to_string()))?;
        LatentMap::new(grid, decoder).map_err(|e| malformed_at(0, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>, precision: Precision) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes(precision))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn malformed_at(offset: usize, message: String) -> Error {
    Error::Malformed {
        what: "map file",
        offset,
        message,
    }
}

/// Stable 64-bit identity of a map's full-precision contents.
pub fn map_fingerprint(grid: &LatentGrid, decoder: &Mlp) -> u64 {
    let mut w = Writer::new();
    write_map_body(&mut w, grid, decoder, Precision::F64);
    binio::fnv1a(&w.buf)
}

fn write_map_body(w: &mut Writer, grid: &LatentGrid, decoder: &Mlp, precision: Precision) {
    w.bytes(MAP_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u8(precision.tag());
    write_grid_config(w, grid.config());
    for level in grid.levels() {
        w.u8(match level.mode() {
            StorageMode::Dense => 0,
            StorageMode::Hashed => 1,
        });
        w.u64(level.slot_count() as u64);
        w.floats(level.features(), precision);
    }
    w.u64(grid.occupancy().len() as u64);
    for coord in grid.occupancy() {
        for &v in coord {
            w.u32(v);
        }
    }
    write_decoder_block(w, decoder, precision);
}

fn write_grid_config(w: &mut Writer, cfg: &GridConfig) {
    for &v in cfg.bounds.min.iter().chain(&cfg.bounds.max) {
        w.f64(v);
    }
    w.u32(cfg.levels.len() as u32);
    for &cell in &cfg.levels {
        w.f64(cell);
    }
    w.u32(cfg.feature_dim as u32);
    w.u64(cfg.table_size as u64);
    w.u64(cfg.seed);
}

fn read_grid_config(r: &mut Reader) -> Result<GridConfig> {
    let start = r.offset();
    let mut b = [0.0; 6];
    for v in &mut b {
        *v = r.f64()?;
    }
    let n = r.u32()?;
    let n = r.ensure(n as u64, 8)?;
    let levels = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let feature_dim = r.u32()? as usize;
    let table_size = r.u64()?;
    let seed = r.u64()?;
    let cfg = GridConfig {
        bounds: Bounds {
            min: [b[0], b[1], b[2]],
            max: [b[3], b[4], b[5]],
        },
        levels,
        feature_dim,
        table_size: usize::try_from(table_size).unwrap_or(usize::MAX),
        seed,
    };
    cfg.validate().map_err(|e| Error::Malformed {
        what: "map file",
        offset: start,
        message: e.to_string(),
    })?;
    Ok(cfg)
}

/// Precision byte, layer count, widths, then weights and bias per layer.
fn write_layers(w: &mut Writer, mlp: &Mlp, precision: Precision) {
    w.u8(precision.tag());
    w.u32(mlp.layers().len() as u32);
    for d in mlp.dims() {
        w.u32(d as u32);
    }
    for layer in mlp.layers() {
        w.floats(layer.weights(), precision);
        w.floats(layer.bias(), precision);
    }
}

fn read_layers(r: &mut Reader) -> Result<Vec<Layer>> {
    let precision = r.precision()?;
    let n = r.u32()?;
    if n == 0 {
        return Err(r.malformed("network has no layers"));
    }
    let n = r.ensure(n as u64 + 1, 4)? - 1;
    let at = r.offset();
    let dims = (0..=n)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    if dims.contains(&0) {
        return Err(Error::Malformed {
            what: "network block",
            offset: at,
            message: "zero layer width".into(),
        });
    }
    let mut layers = Vec::with_capacity(n);
    for pair in dims.windows(2) {
        let (i, o) = (pair[0], pair[1]);
        let weights = r.floats((i as u64).saturating_mul(o as u64), precision)?;
        let bias = r.floats(o as u64, precision)?;
        layers.push(Layer::new(i, o, weights, bias)?);
    }
    Ok(layers)
}

/// The decoder payload, shared by map files and standalone decoder files.
fn write_decoder_block(w: &mut Writer, mlp: &Mlp, precision: Precision) {
    w.bytes(DECODER_MAGIC);
    w.u32(FORMAT_VERSION);
    write_layers(w, mlp, precision);
}

fn read_decoder_block(r: &mut Reader) -> Result<Vec<Layer>> {
    r.magic(DECODER_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    read_layers(r)
}

pub fn decoder_to_bytes(mlp: &Mlp, precision: Precision) -> Vec<u8> {
    let mut w = Writer::new();
    write_decoder_block(&mut w, mlp, precision);
    w.finish_with_checksum()
}

pub fn decoder_from_bytes(bytes: &[u8]) -> Result<Mlp> {
    let mut r = Reader::new(bytes, "decoder file");
    let layers = read_decoder_block(&mut r)?;
    r.checksum()?;
    Mlp::from_layers(layers)
}

pub fn save_decoder(mlp: &Mlp, path: impl AsRef<Path>, precision: Precision) -> Result<()> {
    write_atomic(path.as_ref(), &decoder_to_bytes(mlp, precision))
}

pub fn load_decoder(path: impl AsRef<Path>) -> Result<Mlp> {
    decoder_from_bytes(&fs::read(path)?)
}

/// Aggregator weights are always stored at full precision.
pub fn aggregator_to_bytes(w: &AggregatorWeights) -> Vec<u8> {
    let mut out = Writer::new();
    out.bytes(AGGREGATOR_MAGIC);
    out.u32(FORMAT_VERSION);
    out.u32(w.posenc.num_frequencies as u32);
    out.u64(w.seed);
    write_layers(&mut out, &w.mlp, Precision::F64);
    out.finish_with_checksum()
}

pub fn aggregator_from_bytes(bytes: &[u8]) -> Result<AggregatorWeights> {
    let mut r = Reader::new(bytes, "aggregator file");
    r.magic(AGGREGATOR_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let at = r.offset();
    let b = r.u32()? as usize;
    let seed = r.u64()?;
    let layers = read_layers(&mut r)?;
    r.checksum()?;
    let posenc = PosEncConfig { num_frequencies: b };
    let mlp = Mlp::from_layers(layers)?;
    if b == 0 || mlp.in_dim() <= posenc.output_dim() {
        return Err(Error::Malformed {
            what: "aggregator file",
            offset: at,
            message: format!("{b} frequencies incompatible with input width {}", mlp.in_dim()),
        });
    }
    Ok(AggregatorWeights { posenc, seed, mlp })
}

pub fn save_aggregator(w: &AggregatorWeights, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &aggregator_to_bytes(w))
}

pub fn load_aggregator(path: impl AsRef<Path>) -> Result<AggregatorWeights> {
    aggregator_from_bytes(&fs::read(path)?)
}

/// Binary token: magic, version, `u32 m`, `m` float32 values, checksum.
pub fn token_to_bytes(values: &[f64]) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(TOKEN_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(values.len() as u32);
    w.floats(values, Precision::F32);
    w.finish_with_checksum()
}

pub fn token_from_bytes(bytes: &[u8]) -> Result<Vec<f64>> {
    let mut r = Reader::new(bytes, "token file");
    r.magic(TOKEN_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let m = r.u32()?;
    let values = r.floats(m as u64, Precision::F32)?;
    r.checksum()?;
    Ok(values)
}

/// Text token: one value per line in shortest round-trip notation.
pub fn token_to_text(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}\n")).collect()
}

pub fn token_from_text(text: &str) -> Result<Vec<f64>> {
    let mut values = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let l = line.trim();
        if !l.is_empty() {
            match l.parse::<f64>() {
                Ok(v) if v.is_finite() => values.push(v),
                _ => {
                    return Err(Error::Malformed {
                        what: "token text",
                        offset,
                        message: format!("{l:?} is not a finite number"),
                    })
                }
            }
        }
        offset += line.len();
    }
    Ok(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TokenFormat {
    #[default]
    Binary,
    Text,
}

pub fn save_token(values: &[f64], path: impl AsRef<Path>, format: TokenFormat) -> Result<()> {
    match format {
        TokenFormat::Binary => write_atomic(path.as_ref(), &token_to_bytes(values)),
        TokenFormat::Text => write_atomic(path.as_ref(), token_to_text(values).as_bytes()),
    }
}

/// Detects the format from the leading magic.
pub fn load_token(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(TOKEN_MAGIC) {
        token_from_bytes(&bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|e| Error::Malformed {
            what: "token text",
            offset: e.utf8_error().valid_up_to(),
            message: "neither an LMTK file nor UTF-8 text".into(),
        })?;
        token_from_text(&text)
    }
}

/// Writes via a sibling temp file and rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
