//! The scene representation: one independent MLP per cell of a uniform grid
//! over the scene box, with point queries dispatched by spatial binning.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::encoding::PositionalEncoding;
use crate::error::{Error, Result};
use crate::field::{bin_clamped, bin_point, Aabb, GridResolution, Vec3};
use crate::mlp::{forward, init_params, Layout, MlpArchitecture, MlpParams};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGrid<T = f32> {
    pub aabb: Aabb,
    pub resolution: GridResolution,
    pub encoding: PositionalEncoding,
    pub layout: Arc<Layout>,
    /// Indexed by x-major flattened cell index.
    pub params: Vec<MlpParams<T>>,
}

/// Everything about a grid except its weights; stored in checkpoint headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridManifest {
    pub aabb: Aabb,
    pub resolution: GridResolution,
    pub encoding: PositionalEncoding,
    pub architecture: MlpArchitecture,
}

impl<T: Real> NetworkGrid<T> {
    /// Fresh grid; network `i` is initialized from seed `seed * 1_000_003 + i`.
    pub fn random(manifest: &GridManifest, seed: u64) -> Result<Self> {
        let layout = Arc::new(Layout::new(&manifest.architecture)?);
        check_encoding(&manifest.encoding, &manifest.architecture)?;
        let params = (0..manifest.resolution.cell_count())
            .map(|i| init_params(layout.clone(), network_seed(seed, i)))
            .collect();
        Ok(Self {
            aabb: manifest.aabb,
            resolution: manifest.resolution,
            encoding: manifest.encoding,
            layout,
            params,
        })
    }

    /// Grid whose every cell holds a copy of `params`.
    pub fn uniform(
        aabb: Aabb,
        resolution: GridResolution,
        encoding: PositionalEncoding,
        params: MlpParams<T>,
    ) -> Result<Self> {
        check_encoding(&encoding, &params.layout.arch)?;
        Ok(Self {
            aabb,
            resolution,
            encoding,
            layout: params.layout.clone(),
            params: vec![params; resolution.cell_count()],
        })
    }

    pub fn from_parts(manifest: &GridManifest, params: Vec<MlpParams<T>>) -> Result<Self> {
        let layout = Arc::new(Layout::new(&manifest.architecture)?);
        check_encoding(&manifest.encoding, &manifest.architecture)?;
        if params.len() != manifest.resolution.cell_count() {
            return Err(Error::DimensionMismatch {
                what: "network count",
                expected: manifest.resolution.cell_count(),
                got: params.len(),
            });
        }
        for p in &params {
            if p.data.len() != layout.param_count {
                return Err(Error::DimensionMismatch {
                    what: "network parameters",
                    expected: layout.param_count,
                    got: p.data.len(),
                });
            }
        }
        let params = params
            .into_iter()
            .map(|p| MlpParams {
                layout: layout.clone(),
                data: p.data,
            })
            .collect();
        Ok(Self {
            aabb: manifest.aabb,
            resolution: manifest.resolution,
            encoding: manifest.encoding,
            layout,
            params,
        })
    }

    pub fn manifest(&self) -> GridManifest {
        GridManifest {
            aabb: self.aabb,
            resolution: self.resolution,
            encoding: self.encoding,
            architecture: self.layout.arch.clone(),
        }
    }

    pub fn network_count(&self) -> usize {
        self.params.len()
    }

    pub fn cast<U: Real>(&self) -> NetworkGrid<U> {
        NetworkGrid {
            aabb: self.aabb,
            resolution: self.resolution,
            encoding: self.encoding,
            layout: self.layout.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    pub fn network_index(&self, x: &Vec3) -> Result<usize> {
        Ok(self.resolution.flatten(bin_point(x, &self.aabb, self.resolution)?))
    }

    #[inline]
    pub fn network_index_clamped(&self, x: &Vec3) -> usize {
        self.resolution.flatten(bin_clamped(x, &self.aabb, self.resolution))
    }

    /// Box coordinates mapped to `[-1, 1]^3` before encoding.
    #[inline]
    pub fn normalized(&self, x: &Vec3) -> [T; 3] {
        std::array::from_fn(|a| {
            let t = (x[a] - self.aabb.min[a]) / (self.aabb.max[a] - self.aabb.min[a]);
            T::from_single(2.0 * t - 1.0)
        })
    }

    #[inline]
    pub fn encode_position_into(&self, x: &Vec3, out: &mut [T]) {
        self.encoding.position().encode_into(self.normalized(x), out);
    }

    #[inline]
    pub fn encode_direction_into(&self, d: &Vec3, out: &mut [T]) {
        self.encoding
            .direction()
            .encode_into([T::from_single(d.x), T::from_single(d.y), T::from_single(d.z)], out);
    }

    /// Radiance at `x` seen from direction `d`, from the network owning the
    /// cell of `x`.
    pub fn query_field(&self, x: &Vec3, d: &Vec3) -> Result<([T; 3], T)> {
        let idx = self.network_index(x)?;
        let mut xe = vec![T::zero(); self.encoding.position_dim()];
        let mut de = vec![T::zero(); self.encoding.direction_dim()];
        self.encode_position_into(x, &mut xe);
        self.encode_direction_into(d, &mut de);
        forward(&self.params[idx], &xe, &de)
    }
}

pub(crate) fn network_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

fn check_encoding(enc: &PositionalEncoding, arch: &MlpArchitecture) -> Result<()> {
    if enc.position_dim() != arch.position_input_dim || enc.direction_dim() != arch.direction_input_dim {
        return Err(Error::InvalidConfig(format!(
            "encoding produces {}+{} features, network expects {}+{}",
            enc.position_dim(),
            enc.direction_dim(),
            arch.position_input_dim,
            arch.direction_input_dim
        )));
    }
    Ok(())
}

/// Largest box axis gets `max_dim` cells, the others as many cubic cells as
/// fit (rounded to nearest, at least one).
pub fn grid_resolution_rule(aabb: &Aabb, max_dim: usize) -> GridResolution {
    let ext = aabb.extent();
    let largest = ext.max();
    let cell = largest / max_dim as f32;
    GridResolution(std::array::from_fn(|a| {
        if ext[a] == largest {
            max_dim
        } else {
            ((ext[a] / cell).round() as usize).clamp(1, max_dim)
        }
    }))
}
