//! Spatial object stream: feature-map grids whose channel fibers are the
//! object representations, loaded from files or computed by a small
//! trainable convolution stub.
//!
//! Feature-map file layout: magic `PSRNFMAP`, version u32, H u32, W u32,
//! D u32, then H*W*D little-endian 32-bit floats ordered h-major, then w,
//! then channel. All integers little-endian. Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use rand::Rng;

use numcore::{Graph, NodeId, ParameterSet};

use crate::error::{PsrnError, Result};

pub const FEATMAP_MAGIC: &[u8; 8] = b"PSRNFMAP";
pub const FEATMAP_VERSION: u32 = 1;

/// An H x W x D grid of finite 32-bit floats, row-major with the channel
/// fastest. Paper-scale grids are 7x7x512; the toy default is 4x4 with a
/// small channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    h: usize,
    w: usize,
    d: usize,
    values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, d: usize, values: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || d == 0 || values.len() != h * w * d {
            return Err(PsrnError::Format {
                what: "feature map".to_string(),
                details: format!("{h}x{w}x{d} grid vs {} values", values.len()),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(PsrnError::Format {
                what: "feature map".to_string(),
                details: "non-finite value".to_string(),
            });
        }
        Ok(FeatureMap { h, w, d, values })
    }

    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        FeatureMap {
            h,
            w,
            d,
            values: vec![0.0; h * w * d],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.d)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    /// The D-dim channel fiber at one grid cell.
    pub fn fiber(&self, h: usize, w: usize) -> &[f32] {
        let base = (h * self.w + w) * self.d;
        &self.values[base..base + self.d]
    }
}

/// The ordered H*W object vectors extracted from a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSet {
    pub object_dim: usize,
    pub vectors: Vec<Vec<f64>>,
}

impl ObjectSet {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Enumerates grid fibers row-major over (h, w); object i is the channel
/// vector at that cell. Pure reshaping: the value multiset is unchanged.
pub fn extract_objects(map: &FeatureMap) -> ObjectSet {
    let mut vectors = Vec::with_capacity(map.h * map.w);
    for h in 0..map.h {
        for w in 0..map.w {
            vectors.push(map.fiber(h, w).iter().map(|&v| f64::from(v)).collect());
        }
    }
    ObjectSet {
        object_dim: map.d,
        vectors,
    }
}

pub fn feature_map_bytes(map: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + map.values.len() * 4);
    out.extend_from_slice(FEATMAP_MAGIC);
    out.extend_from_slice(&FEATMAP_VERSION.to_le_bytes());
    out.extend_from_slice(&(map.h as u32).to_le_bytes());
    out.extend_from_slice(&(map.w as u32).to_le_bytes());
    out.extend_from_slice(&(map.d as u32).to_le_bytes());
    for &v in &map.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_feature_map(bytes: &[u8], what: &str) -> Result<FeatureMap> {
    let fail = |offset: usize, details: String| PsrnError::Format {
        what: what.to_string(),
        details: format!("at byte {offset}: {details}"),
    };
    if bytes.len() < 8 || &bytes[..8] != FEATMAP_MAGIC {
        return Err(fail(0, format!("bad magic, expected {FEATMAP_MAGIC:?}")));
    }
    let u32_at = |off: usize| -> Result<u32> {
        let slice = bytes
            .get(off..off + 4)
            .ok_or_else(|| fail(off, "truncated header".to_string()))?;
        Ok(u32::from_le_bytes(slice.try_into().expect("4 bytes")))
    };
    let version = u32_at(8)?;
    if version != FEATMAP_VERSION {
        return Err(fail(8, format!("unsupported version {version}")));
    }
    let h = u32_at(12)? as usize;
    let w = u32_at(16)? as usize;
    let d = u32_at(20)? as usize;
    let expected = 24 + h * w * d * 4;
    if bytes.len() < expected {
        return Err(fail(
            bytes.len(),
            format!("truncated payload: {h}x{w}x{d} needs {expected} bytes, file has {}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(fail(expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    let mut values = Vec::with_capacity(h * w * d);
    for i in 0..h * w * d {
        let off = 24 + i * 4;
        values.push(f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")));
    }
    FeatureMap::new(h, w, d, values)
}

pub fn save_feature_map(path: &Path, map: &FeatureMap) -> Result<()> {
    fs::write(path, feature_map_bytes(map)).map_err(|e| PsrnError::io(path, e))
}

pub fn load_feature_map(path: &Path) -> Result<FeatureMap> {
    let bytes = fs::read(path).map_err(|e| PsrnError::io(path, e))?;
    parse_feature_map(&bytes, &path.display().to_string())
}

/// Trainable stand-in for the pretrained backbone: two conv3x3 + ReLU +
/// 2x2 average-pool blocks, so the total stride is 4. The input raster is a
/// feature-map-format grid with `in_channels` channels.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConvStubSpec {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
}

impl ConvStubSpec {
    pub const STRIDE: usize = 4;

    pub fn param_names() -> [&'static str; 4] {
        ["obj.conv0.k", "obj.conv0.b", "obj.conv1.k", "obj.conv1.b"]
    }

    pub fn init(&self, params: &mut ParameterSet<f64>, rng: &mut impl Rng) -> Result<()> {
        // kernels are [c_out, 3, 3, c_in]; reuse the fan-based uniform init
        // by treating each kernel as a [c_out, 9 * c_in] map
        let mut kernel = |params: &mut ParameterSet<f64>, name: &str, c_out: usize, c_in: usize| {
            let fan = 9 * c_in + c_out;
            let limit = (6.0 / fan as f64).sqrt();
            let values: Vec<f64> = (0..c_out * 9 * c_in)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            params
                .insert(
                    name,
                    numcore::TensorBuffer::from_values(&[c_out, 3, 3, c_in], values)?,
                )
                .map_err(PsrnError::from)
        };
        kernel(params, "obj.conv0.k", self.mid_channels, self.in_channels)?;
        params.add_bias("obj.conv0.b", self.mid_channels)?;
        kernel(params, "obj.conv1.k", self.out_channels, self.mid_channels)?;
        params.add_bias("obj.conv1.b", self.out_channels)?;
        Ok(())
    }

    /// Differentiable forward pass from a raster to an `[H/4, W/4, out]`
    /// grid node.
    pub fn forward(
        &self,
        g: &mut Graph<f64>,
        params: &ParameterSet<f64>,
        raster: &FeatureMap,
    ) -> Result<NodeId> {
        let (h, w, d) = raster.dims();
        if d != self.in_channels {
            return Err(PsrnError::Config(format!(
                "conv stub expects {} input channels, raster has {d}",
                self.in_channels
            )));
        }
        if h % Self::STRIDE != 0 || w % Self::STRIDE != 0 {
            return Err(PsrnError::Config(format!(
                "raster dims {h}x{w} not divisible by the stub stride {}",
                Self::STRIDE
            )));
        }
        let values: Vec<f64> = raster.values().iter().map(|&v| f64::from(v)).collect();
        let input = g.leaf(&[h, w, d], values)?;
        let k0 = g.param(params, "obj.conv0.k")?;
        let b0 = g.param(params, "obj.conv0.b")?;
        let c0 = g.conv3x3(input, k0, b0)?;
        let r0 = g.relu(c0)?;
        let p0 = g.avg_pool2(r0)?;
        let k1 = g.param(params, "obj.conv1.k")?;
        let b1 = g.param(params, "obj.conv1.b")?;
        let c1 = g.conv3x3(p0, k1, b1)?;
        let r1 = g.relu(c1)?;
        let grid = g.avg_pool2(r1)?;
        Ok(grid)
    }
}

/// Slices a grid node `[H, W, D]` into its H*W fiber nodes, row-major.
pub fn grid_object_nodes(g: &mut Graph<f64>, grid: NodeId) -> Result<Vec<NodeId>> {
    let (h, w, d) = match g.shape(grid) {
        [h, w, d] => (*h, *w, *d),
        s => {
            return Err(PsrnError::Config(format!(
                "object grid must be [H, W, D], got {s:?}"
            )))
        }
    };
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h * w {
        out.push(g.slice(grid, i * d, d)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(h: usize, w: usize, d: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..h * w * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        FeatureMap::new(h, w, d, values).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let map = random_map(3, 5, 4, 1);
        let bytes = feature_map_bytes(&map);
        let loaded = parse_feature_map(&bytes, "test").unwrap();
        assert_eq!(map, loaded);
        assert_eq!(bytes, feature_map_bytes(&loaded));
    }

    #[test]
    fn truncated_payload_is_reported() {
        let map = random_map(7, 7, 8, 2);
        let bytes = feature_map_bytes(&map);
        let err = parse_feature_map(&bytes[..bytes.len() - 3], "test").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("truncated"), "{msg}");
        assert!(msg.contains("byte"), "{msg}");
    }

    #[test]
    fn bad_magic_is_reported() {
        let mut bytes = feature_map_bytes(&random_map(1, 1, 1, 3));
        bytes[2] = b'!';
        let err = parse_feature_map(&bytes, "test").unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn degenerate_grid_yields_single_object() {
        let map = random_map(1, 1, 6, 4);
        let objects = extract_objects(&map);
        assert_eq!(objects.len(), 1);
        assert_eq!(objects.object_dim, 6);
        let expected: Vec<f64> = map.values().iter().map(|&v| f64::from(v)).collect();
        assert_eq!(objects.vectors[0], expected);
    }

    #[test]
    fn paper_scale_grid_yields_49_objects() {
        let map = FeatureMap::zeros(7, 7, 512);
        let objects = extract_objects(&map);
        assert_eq!(objects.len(), 49);
        assert!(objects.vectors.iter().all(|v| v.len() == 512));
    }

    #[test]
    fn extraction_matches_triple_loop_oracle() {
        let map = random_map(2, 3, 4, 5);
        let objects = extract_objects(&map);
        // triple-loop index-arithmetic oracle
        for h in 0..2 {
            for w in 0..3 {
                for c in 0..4 {
                    let flat = (h * 3 + w) * 4 + c;
                    assert_eq!(objects.vectors[h * 3 + w][c], f64::from(map.values()[flat]));
                }
            }
        }
    }

    #[test]
    fn extraction_preserves_value_multiset() {
        let map = random_map(4, 4, 3, 6);
        let objects = extract_objects(&map);
        let mut from_map: Vec<f64> = map.values().iter().map(|&v| f64::from(v)).collect();
        let mut from_objects: Vec<f64> = objects.vectors.into_iter().flatten().collect();
        from_map.sort_by(f64::total_cmp);
        from_objects.sort_by(f64::total_cmp);
        assert_eq!(from_map, from_objects);
    }

    #[test]
    fn conv_stub_zero_params_annihilate() {
        let spec = ConvStubSpec {
            in_channels: 2,
            mid_channels: 3,
            out_channels: 4,
        };
        let mut params = ParameterSet::<f64>::new();
        params
            .insert("obj.conv0.k", numcore::TensorBuffer::zeros(&[3, 3, 3, 2]))
            .unwrap();
        params.add_bias("obj.conv0.b", 3).unwrap();
        params
            .insert("obj.conv1.k", numcore::TensorBuffer::zeros(&[4, 3, 3, 3]))
            .unwrap();
        params.add_bias("obj.conv1.b", 4).unwrap();

        let raster = random_map(8, 8, 2, 7);
        let mut g = Graph::new();
        let grid = spec.forward(&mut g, &params, &raster).unwrap();
        assert_eq!(g.shape(grid), &[2, 2, 4]);
        assert!(g.values(grid).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_stub_shape_contract() {
        let spec = ConvStubSpec {
            in_channels: 3,
            mid_channels: 5,
            out_channels: 6,
        };
        let mut params = ParameterSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        spec.init(&mut params, &mut rng).unwrap();
        for (hw, expected) in [(8usize, 2usize), (16, 4)] {
            let raster = random_map(hw, hw, 3, hw as u64);
            let mut g = Graph::new();
            let grid = spec.forward(&mut g, &params, &raster).unwrap();
            assert_eq!(g.shape(grid), &[expected, expected, 6]);
            let objects = grid_object_nodes(&mut g, grid).unwrap();
            assert_eq!(objects.len(), expected * expected);
        }
    }

    #[test]
    fn conv_stub_rejects_indivisible_dims() {
        let spec = ConvStubSpec {
            in_channels: 1,
            mid_channels: 1,
            out_channels: 1,
        };
        let mut params = ParameterSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        spec.init(&mut params, &mut rng).unwrap();
        let raster = random_map(6, 8, 1, 10);
        let mut g = Graph::new();
        assert!(matches!(
            spec.forward(&mut g, &params, &raster),
            Err(PsrnError::Config(_))
        ));
    }
}
