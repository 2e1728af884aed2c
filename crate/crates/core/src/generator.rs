//! The conditional generator `G(z, y)`: construction, synthesis, input
//! gradients and the on-disk checkpoint format.
//!
//! The first layer of every generator appends `y` to `z`
//! (`ConcatChannels`), so the whole stack sees `concat(z, y)` as one vector
//! and the input gradient splits cleanly back into `(dz, dy)`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{LayerSpec, Network, ParameterSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "CGANINV-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Standard deviation of the normal weight initialisation.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub latent_dim: usize,
    pub cond_dim: usize,
    /// `[channels, height, width]`; pixels live in `[-1, 1]`.
    pub image_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    /// Allows a stack without the final tanh, e.g. a purely linear map.
    /// Outputs are then not range-limited.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub linear_output: bool,
}

impl GeneratorSpec {
    /// DCGAN-shaped stack for 32x32 images:
    /// `concat(z, y) -> dense -> reshape(c x 4 x 4) -> norm -> relu ->
    /// [tconv -> norm -> relu] x 2 -> tconv -> tanh`, halving the channel
    /// count at each upsampling step.
    pub fn dcgan32(
        latent_dim: usize,
        cond_dim: usize,
        image_channels: usize,
        base_channels: usize,
    ) -> Self {
        let c = base_channels;
        let up = |cin: usize, cout: usize, size: usize| LayerSpec::TransposedConv2d {
            in_channels: cin,
            out_channels: cout,
            kernel: 4,
            stride: 2,
            padding: 1,
            output_size: [size, size],
        };
        let layers = vec![
            LayerSpec::ConcatChannels {
                side: vec![cond_dim],
            },
            LayerSpec::Dense {
                inputs: latent_dim + cond_dim,
                outputs: c * 16,
            },
            LayerSpec::Reshape {
                shape: vec![c, 4, 4],
            },
            LayerSpec::AffineNorm { channels: c },
            LayerSpec::Relu,
            up(c, c / 2, 8),
            LayerSpec::AffineNorm { channels: c / 2 },
            LayerSpec::Relu,
            up(c / 2, c / 4, 16),
            LayerSpec::AffineNorm { channels: c / 4 },
            LayerSpec::Relu,
            up(c / 4, image_channels, 32),
            LayerSpec::Tanh,
        ];
        GeneratorSpec {
            latent_dim,
            cond_dim,
            image_shape: [image_channels, 32, 32],
            layers,
            linear_output: false,
        }
    }

    /// `d_z = 100`, `d_y = 10`, one 32x32 channel, 256 base channels.
    pub fn desk_default() -> Self {
        Self::dcgan32(100, 10, 1, 256)
    }

    /// Same layout as [`GeneratorSpec::desk_default`] with 32 base channels,
    /// small enough to train and invert on a single CPU core.
    pub fn compact() -> Self {
        Self::dcgan32(100, 10, 1, 32)
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    /// Checks the generator invariants and returns the validated network.
    pub fn build_network(&self) -> Result<Network> {
        if self.latent_dim < 1 {
            return Err(Error::InvalidSpec("latent_dim must be at least 1".into()));
        }
        if self.cond_dim < 2 {
            return Err(Error::InvalidSpec(format!(
                "cond_dim must be at least 2, got {}",
                self.cond_dim
            )));
        }
        if self.image_shape.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "bad image shape {:?}",
                self.image_shape
            )));
        }
        match self.layers.first() {
            Some(LayerSpec::ConcatChannels { side }) if side.as_slice() == [self.cond_dim] => {}
            _ => {
                return Err(Error::InvalidSpec(format!(
                    "first layer must concatenate a [{}] conditional vector",
                    self.cond_dim
                )))
            }
        }
        if !self.linear_output && self.layers.last() != Some(&LayerSpec::Tanh) {
            return Err(Error::InvalidSpec("final layer must be tanh".into()));
        }
        let net = Network::new(&[self.latent_dim], self.layers.clone())?;
        if net.output_shape() != self.image_shape {
            return Err(Error::InvalidSpec(format!(
                "layers produce {:?}, image shape is {:?}",
                net.output_shape(),
                self.image_shape
            )));
        }
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub seed: u64,
    pub provenance: String,
    pub format_version: u32,
}

/// Generator spec plus weights. Immutable once built; share freely across
/// threads.
#[derive(Debug, Clone)]
pub struct GeneratorCheckpoint {
    spec: GeneratorSpec,
    params: ParameterSet,
    metadata: CheckpointMetadata,
    net: Network,
}

impl PartialEq for GeneratorCheckpoint {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params && self.metadata == other.metadata
    }
}

/// Builds a generator with seeded `N(0, 0.02²)` weights.
pub fn build_generator(spec: GeneratorSpec, init_seed: u64) -> Result<GeneratorCheckpoint> {
    let net = spec.build_network()?;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let params = net.init_params(&mut rng, INIT_STD);
    let metadata = CheckpointMetadata {
        seed: init_seed,
        provenance: "untrained".into(),
        format_version: CHECKPOINT_VERSION,
    };
    Ok(GeneratorCheckpoint {
        spec,
        params,
        metadata,
        net,
    })
}

impl GeneratorCheckpoint {
    pub fn from_parts(
        spec: GeneratorSpec,
        params: ParameterSet,
        metadata: CheckpointMetadata,
    ) -> Result<Self> {
        let net = spec.build_network()?;
        net.check_params(&params)?;
        if !params.all_finite() {
            return Err(Error::InvalidSpec(
                "checkpoint parameters contain non-finite values".into(),
            ));
        }
        Ok(GeneratorCheckpoint {
            spec,
            params,
            metadata,
            net,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn metadata(&self) -> &CheckpointMetadata {
        &self.metadata
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.spec.cond_dim
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.spec.image_shape
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.metadata.provenance = provenance.into();
        self
    }

    pub(crate) fn replace_params(&mut self, params: ParameterSet) {
        debug_assert!(self.net.check_params(&params).is_ok());
        self.params = params;
    }

    fn check_inputs(&self, z: &Tensor, y: &Tensor) -> Result<()> {
        z.ensure_shape(&[self.spec.latent_dim], "latent vector")?;
        y.ensure_shape(&[self.spec.cond_dim], "conditional vector")
    }

    /// `G(z, y)`. `y` may be any real vector, not only one-hot.
    pub fn generate(&self, z: &Tensor, y: &Tensor) -> Result<Tensor> {
        self.check_inputs(z, y)?;
        self.net.eval(&self.params, z, Some(y))
    }

    /// Gradients of `<G(z, y), upstream>` with respect to `z` and `y`.
    pub fn input_gradients(
        &self,
        z: &Tensor,
        y: &Tensor,
        upstream: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        self.check_inputs(z, y)?;
        let (_, mut tape) = self.net.forward(&self.params, z, Some(y))?;
        let grads = tape.backward_inputs(upstream)?;
        Ok((
            grads.input,
            grads.side.expect("generator has a conditional junction"),
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Text header (`key=value` lines ending with `end`) followed by one
    /// length-prefixed little-endian `f64` payload per parameter tensor.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        header.push_str(CHECKPOINT_MAGIC);
        header.push('\n');
        header.push_str(&format!(
            "format_version={}\n",
            self.metadata.format_version
        ));
        header.push_str(&format!("seed={}\n", self.metadata.seed));
        header.push_str(&format!(
            "provenance={}\n",
            serde_json::to_string(&self.metadata.provenance)?
        ));
        header.push_str(&format!("spec={}\n", serde_json::to_string(&self.spec)?));
        header.push_str(&format!("tensors={}\n", self.params.len()));
        for (name, t) in self.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor={name} {}\n", dims.join("x")));
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        for (_, t) in self.params.iter() {
            out.extend_from_slice(&((t.len() * 8) as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = 0usize;
        let mut next_line = |what: &str| -> Result<&str> {
            let rest = &bytes[cursor..];
            let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| {
                Error::CorruptHeader(format!("unterminated header before {what}"))
            })?;
            cursor += end + 1;
            std::str::from_utf8(&rest[..end])
                .map_err(|_| Error::CorruptHeader(format!("{what} is not UTF-8")))
        };

        let first_line = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
        if first_line != CHECKPOINT_MAGIC.as_bytes() {
            return Err(Error::BadMagic(format!(
                "expected {CHECKPOINT_MAGIC:?}, found {:?}",
                String::from_utf8_lossy(&first_line[..first_line.len().min(32)])
            )));
        }
        next_line("magic")?;
        let version: u32 = parse_field(next_line("format_version")?, "format_version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let seed: u64 = parse_field(next_line("seed")?, "seed")?;
        let provenance: String =
            serde_json::from_str(field(next_line("provenance")?, "provenance")?)
                .map_err(|e| Error::CorruptHeader(format!("provenance: {e}")))?;
        let spec: GeneratorSpec = serde_json::from_str(field(next_line("spec")?, "spec")?)
            .map_err(|e| Error::CorruptHeader(format!("spec: {e}")))?;
        let count: usize = parse_field(next_line("tensors")?, "tensors")?;
        let mut layout = Vec::with_capacity(count);
        for _ in 0..count {
            let entry = field(next_line("tensor")?, "tensor")?;
            let (name, dims) = entry
                .split_once(' ')
                .ok_or_else(|| Error::CorruptHeader(format!("tensor entry {entry:?}")))?;
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::CorruptHeader(format!("tensor dims {dims:?}")))?;
            layout.push((name.to_string(), shape));
        }
        if next_line("end")? != "end" {
            return Err(Error::CorruptHeader("missing end marker".into()));
        }

        let mut params = ParameterSet::new();
        for (name, shape) in layout {
            let n: usize = shape.iter().product();
            let len_bytes = bytes
                .get(cursor..cursor + 8)
                .ok_or_else(|| Error::Truncated(format!("length prefix of {name}")))?;
            let len = u64::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
            cursor += 8;
            if len != n * 8 {
                return Err(Error::CorruptHeader(format!(
                    "{name}: payload of {len} bytes for {n} values"
                )));
            }
            let payload = bytes
                .get(cursor..cursor + len)
                .ok_or_else(|| Error::Truncated(format!("{name}: {len} bytes expected")))?;
            cursor += len;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor =
                Tensor::new(shape, data).map_err(|e| Error::CorruptHeader(e.to_string()))?;
            params
                .push(name, tensor)
                .map_err(|e| Error::CorruptHeader(e.to_string()))?;
        }
        if cursor != bytes.len() {
            return Err(Error::CorruptHeader(format!(
                "{} trailing bytes after last payload",
                bytes.len() - cursor
            )));
        }
        let metadata = CheckpointMetadata {
            seed,
            provenance,
            format_version: version,
        };
        Self::from_parts(spec, params, metadata)
    }
}

fn field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| Error::CorruptHeader(format!("expected {key}=..., found {line:?}")))
}

fn parse_field<T: std::str::FromStr>(line: &str, key: &str) -> Result<T> {
    field(line, key)?
        .parse()
        .map_err(|_| Error::CorruptHeader(format!("unparsable {key} in {line:?}")))
}
