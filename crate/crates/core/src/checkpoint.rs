//! Binary checkpoint container for a network grid and its occupancy grid.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic          8 bytes   "RFGRID01"
//! version        u32       FORMAT_VERSION
//! manifest_len   u32
//! manifest       JSON      architecture, resolution, box, encoding, counts
//! param_count    u64       networks * params per network
//! params         f32 * param_count, networks in flattened cell order
//! has_occupancy  u8        0 or 1
//! [occupancy]    u32 * 3 resolution, f32 * 6 box (min, max),
//!                u64 word count, u64 * words (bit i = bit i%64 of word i/64)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Aabb, GridResolution};
use crate::grid::{GridManifest, NetworkGrid};
use crate::mlp::MlpParams;
use crate::occupancy::OccupancyGrid;

pub const MAGIC: &[u8; 8] = b"RFGRID01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    #[serde(flatten)]
    grid: GridManifest,
    network_count: usize,
    params_per_network: usize,
    endianness: String,
}

pub fn encode_checkpoint(grid: &NetworkGrid<f32>, occupancy: Option<&OccupancyGrid>) -> Result<Vec<u8>> {
    let manifest = Manifest {
        grid: grid.manifest(),
        network_count: grid.network_count(),
        params_per_network: grid.layout.param_count,
        endianness: "little".into(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let param_count = manifest.network_count * manifest.params_per_network;
    let mut out = Vec::with_capacity(64 + json.len() + 4 * param_count);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(param_count as u64).to_le_bytes());
    for p in &grid.params {
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    match occupancy {
        None => out.push(0),
        Some(o) => {
            out.push(1);
            for r in o.resolution.0 {
                out.extend_from_slice(&(r as u32).to_le_bytes());
            }
            for v in o.aabb.min.iter().chain(&o.aabb.max) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(o.words().len() as u64).to_le_bytes());
            for w in o.words() {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                self.at,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a checkpoint. Either everything validates or nothing is returned.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(NetworkGrid<f32>, Option<OccupancyGrid>)> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a network grid checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = r.u32("manifest length")? as usize;
    let manifest: Manifest = serde_json::from_slice(r.take(len, "manifest")?)?;
    if manifest.endianness != "little" {
        return Err(Error::Checkpoint(format!("unsupported endianness {:?}", manifest.endianness)));
    }
    let layout = crate::mlp::Layout::new(&manifest.grid.architecture)?;
    let networks = manifest.grid.resolution.cell_count();
    if manifest.network_count != networks || manifest.params_per_network != layout.param_count {
        return Err(Error::Checkpoint(format!(
            "manifest counts ({} networks x {}) disagree with its architecture ({networks} x {})",
            manifest.network_count, manifest.params_per_network, layout.param_count
        )));
    }
    let count = r.u64("parameter count")? as usize;
    if count != networks * layout.param_count {
        return Err(Error::Checkpoint(format!(
            "payload declares {count} parameters, manifest implies {}",
            networks * layout.param_count
        )));
    }
    let payload = r.take(4 * count, "parameters")?;
    let layout = std::sync::Arc::new(layout);
    let params = payload
        .chunks_exact(4 * layout.param_count)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            MlpParams::from_data(layout.clone(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    let grid = NetworkGrid::from_parts(&manifest.grid, params)?;

    let occupancy = match r.u8("occupancy flag")? {
        0 => None,
        1 => {
            let mut res = [0usize; 3];
            for v in &mut res {
                *v = r.u32("occupancy resolution")? as usize;
            }
            let mut b = [0f32; 6];
            for v in &mut b {
                *v = r.f32("occupancy box")?;
            }
            let aabb = Aabb::new([b[0], b[1], b[2]], [b[3], b[4], b[5]])?;
            let resolution = GridResolution::new(res)?;
            let n = r.u64("occupancy word count")? as usize;
            let expected = resolution.cell_count().div_ceil(64);
            if n != expected {
                return Err(Error::Checkpoint(format!(
                    "occupancy declares {n} words, resolution implies {expected}"
                )));
            }
            let words = (0..n).map(|_| r.u64("occupancy bitmap")).collect::<Result<Vec<_>>>()?;
            Some(OccupancyGrid::from_words(aabb, resolution, words)?)
        }
        f => return Err(Error::Checkpoint(format!("bad occupancy flag {f}"))),
    };
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok((grid, occupancy))
}

pub fn save_checkpoint(path: &Path, grid: &NetworkGrid<f32>, occupancy: Option<&OccupancyGrid>) -> Result<()> {
    let bytes = encode_checkpoint(grid, occupancy)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(NetworkGrid<f32>, Option<OccupancyGrid>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
