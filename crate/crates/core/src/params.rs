//! All trainable tensors, addressable by name and grouped for per-group
//! learning rates, plus the versioned binary checkpoint format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::label_semantics::NUM_CLASSES;
use crate::tape::{Tape, TensorId};
use crate::voxel_world::{init_features_scaled, FeatureTable, VertexKey, VoxelWorld};

/// Group name of the shared vertex features (trained with its own learning
/// rate). Network tensors carry their group as a name prefix, e.g.
/// `field/trunk0_w`.
pub const VERTEX_GROUP: &str = "vertex";

pub const GROUPS: [&str; 5] = [VERTEX_GROUP, "field", "sky", "style", "refiner"];

const CHECKPOINT_MAGIC: &[u8; 4] = b"VFLD";
const CHECKPOINT_VERSION: u32 = 1;

pub struct ParameterStore {
    pub features: FeatureTable,
    tensors: BTreeMap<String, ArrayD<f64>>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> ArrayD<f64> {
    ndarray::Array::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-scale..scale))
}

fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

impl ParameterStore {
    /// Fresh parameters: shared vertex features for the world's corners plus
    /// all network tensors. Deterministic given the seed.
    pub fn init(world: &VoxelWorld, cfg: &Config, seed: u64) -> Self {
        let features = init_features_scaled(world, cfg.feature_dim, seed, cfg.init_feature_scale);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let mut tensors = BTreeMap::new();
        let linear = |t: &mut BTreeMap<String, ArrayD<f64>>,
                          rng: &mut ChaCha8Rng,
                          prefix: &str,
                          fan_in: usize,
                          fan_out: usize| {
            let scale = (1.0 / fan_in as f64).sqrt();
            t.insert(format!("{prefix}_w"), uniform(rng, &[fan_in, fan_out], scale));
            t.insert(format!("{prefix}_b"), zeros(&[fan_out]));
        };
        let mod_linear = |t: &mut BTreeMap<String, ArrayD<f64>>,
                              rng: &mut ChaCha8Rng,
                              prefix: &str,
                              fan_in: usize,
                              fan_out: usize| {
            let scale = (1.0 / fan_in as f64).sqrt();
            t.insert(format!("{prefix}_w"), uniform(rng, &[fan_in, fan_out], scale));
            t.insert(format!("{prefix}_b"), zeros(&[fan_out]));
            t.insert(format!("{prefix}_a"), uniform(rng, &[cfg.w_dim, fan_in], 0.01));
            t.insert(format!("{prefix}_a0"), ArrayD::ones(IxDyn(&[fan_in])));
        };

        // Style network: 2 layers, no activation after the last.
        linear(&mut tensors, &mut rng, "style/l0", cfg.z_dim, cfg.w_dim);
        linear(&mut tensors, &mut rng, "style/l1", cfg.w_dim, cfg.w_dim);

        // Field MLP: style-independent trunk, plain density head,
        // style-modulated feature head, label embedding.
        let mut in_dim = cfg.field_input_len();
        for i in 0..cfg.trunk_layers {
            linear(
                &mut tensors,
                &mut rng,
                &format!("field/trunk{i}"),
                in_dim,
                cfg.hidden_width,
            );
            in_dim = cfg.hidden_width;
        }
        linear(&mut tensors, &mut rng, "field/sigma", cfg.hidden_width, 1);
        mod_linear(
            &mut tensors,
            &mut rng,
            "field/feat0",
            cfg.hidden_width,
            cfg.hidden_width,
        );
        mod_linear(
            &mut tensors,
            &mut rng,
            "field/feat1",
            cfg.hidden_width,
            cfg.c_dim,
        );
        tensors.insert(
            "field/label_emb".into(),
            uniform(&mut rng, &[NUM_CLASSES, cfg.label_dim], 0.1),
        );

        // Sky dome MLP on the encoded view direction.
        mod_linear(
            &mut tensors,
            &mut rng,
            "sky/l0",
            cfg.sky_input_len(),
            cfg.hidden_width,
        );
        mod_linear(
            &mut tensors,
            &mut rng,
            "sky/l1",
            cfg.hidden_width,
            cfg.c_dim,
        );

        // Image-space refiner: four 3x3 convs (9x9 receptive field) with
        // per-channel affine style modulation, then a 1x1 head to RGB.
        let ch = cfg.refiner_channels;
        let mut ch_in = cfg.c_dim;
        for i in 0..4 {
            let scale = (1.0 / (ch_in * 9) as f64).sqrt();
            tensors.insert(
                format!("refiner/conv{i}_k"),
                uniform(&mut rng, &[ch, ch_in, 3, 3], scale),
            );
            tensors.insert(format!("refiner/conv{i}_b"), zeros(&[ch]));
            tensors.insert(format!("refiner/conv{i}_ms"), zeros(&[cfg.w_dim, ch]));
            tensors.insert(format!("refiner/conv{i}_ms0"), zeros(&[ch]));
            tensors.insert(format!("refiner/conv{i}_mb"), zeros(&[cfg.w_dim, ch]));
            tensors.insert(format!("refiner/conv{i}_mb0"), zeros(&[ch]));
            ch_in = ch;
        }
        let scale = (1.0 / ch as f64).sqrt();
        tensors.insert("refiner/head_k".into(), uniform(&mut rng, &[3, ch, 1, 1], scale));
        tensors.insert("refiner/head_b".into(), zeros(&[3]));

        ParameterStore { features, tensors }
    }

    pub fn tensor(&self, name: &str) -> &ArrayD<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter tensor '{name}'"))
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter tensor '{name}'"))
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    /// Group a tensor name belongs to (its prefix before '/').
    pub fn group_of(name: &str) -> &str {
        name.split('/').next().unwrap_or(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.features.values.len() + self.tensors.values().map(|t| t.len()).sum::<usize>()
    }

    // ----- checkpoint I/O ---------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;

        out.write_all(&(self.features.num_vertices() as u64).to_le_bytes())?;
        out.write_all(&(self.features.dim() as u64).to_le_bytes())?;
        for key in self.features.keys() {
            out.write_all(&key.x.to_le_bytes())?;
            out.write_all(&key.y.to_le_bytes())?;
            out.write_all(&key.z.to_le_bytes())?;
        }
        for v in self.features.values.iter() {
            out.write_all(&v.to_le_bytes())?;
        }

        out.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, tensor) in &self.tensors {
            out.write_all(&(name.len() as u64).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(tensor.ndim() as u64).to_le_bytes())?;
            for &d in tensor.shape() {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in tensor.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());

        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(&mut input)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }

        let num_vertices = read_u64(&mut input)? as usize;
        let dim = read_u64(&mut input)? as usize;
        let mut keys = Vec::with_capacity(num_vertices);
        for _ in 0..num_vertices {
            keys.push(VertexKey {
                x: read_i32(&mut input)?,
                y: read_i32(&mut input)?,
                z: read_i32(&mut input)?,
            });
        }
        let mut values = ndarray::Array2::<f64>::zeros((num_vertices, dim));
        for v in values.iter_mut() {
            *v = read_f64(&mut input)?;
        }
        let features = FeatureTable::from_parts(keys, values);

        let count = read_u64(&mut input)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u64(&mut input)? as usize;
            if name_len > 4096 {
                return Err(bad("tensor name too long"));
            }
            let mut name_bytes = vec![0u8; name_len];
            input.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| bad("tensor name is not UTF-8"))?;
            let ndim = read_u64(&mut input)? as usize;
            if ndim > 8 {
                return Err(bad("tensor rank too large"));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut input)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(read_f64(&mut input)?);
            }
            let tensor = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|_| bad("tensor shape/data mismatch"))?;
            tensors.insert(name, tensor);
        }
        Ok(ParameterStore { features, tensors })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_i32<R: Read>(r: &mut R) -> Result<i32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(i32::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

/// Tape handles for every parameter tensor, registered once per forward
/// pass so gradients can be read back by name afterwards.
pub struct ParamLeaves {
    pub features: TensorId,
    ids: BTreeMap<String, TensorId>,
}

impl ParamLeaves {
    pub fn register(store: &ParameterStore, tape: &mut Tape) -> Self {
        let features = tape.leaf(store.features.values.clone().into_dyn());
        let mut ids = BTreeMap::new();
        for name in store.tensor_names() {
            let id = tape.leaf(store.tensor(&name).clone());
            ids.insert(name, id);
        }
        ParamLeaves { features, ids }
    }

    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unregistered parameter '{name}'"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, TensorId)> {
        self.ids.iter().map(|(n, &id)| (n, id))
    }
}
