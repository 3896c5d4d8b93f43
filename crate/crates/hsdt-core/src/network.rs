//! The full denoising network: a U-shaped stack of transformer blocks with
//! additive skip connections, a residual output head, and weight file IO.
//!
//! Geometry for `n_scales = 3`: a stride-1 head block, two stride-2 encoder
//! blocks, optional extra stride-1 blocks at the innermost scale, and two
//! decoder stages that each upsample spatially by two, add the matching
//! encoder-side features, and run another block. Channel width is constant
//! throughout; only spatial extents change. A zero-initialized `1x1x1`
//! convolution maps features back to one channel and is added to the input,
//! so a freshly built model is exactly the identity.

use std::io::{Read, Write};

use crate::blocks::{
    AttnMode, Conv3dLayer, ForwardEnv, HasParams, S3ConvVariant, TransformerBlock,
};
use crate::error::{Error, Result};
use crate::param::{Bound, ParamStore};
use crate::rng::{stream, LANE_GLOBAL};
use crate::tensor::ops::{Eval, Ops};
use crate::tensor::{Mode, Scalar, Tensor};

/// Magic prefix of the weights container.
pub const WEIGHT_MAGIC: &[u8; 8] = b"HSDTW001";

/// Hyperparameters fixing one network architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HsdtConfig {
    /// Channel width used by every block.
    pub base_channels: usize,
    /// Number of spatial scales; `n - 1` downsamplings happen.
    pub n_scales: usize,
    /// Extra stride-1 blocks at the innermost scale.
    pub extra_inner_blocks: usize,
    /// Band count the learned cross-attention queries were sized for.
    pub d_train: usize,
    /// 1 for plain input, 2 for input stacked with a noise-level map.
    pub input_channels: usize,
    /// Convolution flavor used by every block.
    pub conv_variant: S3ConvVariant,
}

impl HsdtConfig {
    /// Smallest published configuration.
    pub fn small() -> Self {
        HsdtConfig {
            base_channels: 30,
            n_scales: 3,
            extra_inner_blocks: 0,
            d_train: 31,
            input_channels: 1,
            conv_variant: S3ConvVariant::Parallel2,
        }
    }

    /// Mid-size configuration: double width.
    pub fn medium() -> Self {
        HsdtConfig { base_channels: 60, ..HsdtConfig::small() }
    }

    /// Large configuration: mid-size width plus one extra inner block.
    pub fn large() -> Self {
        HsdtConfig { extra_inner_blocks: 1, ..HsdtConfig::medium() }
    }

    pub fn with_base_channels(mut self, c: usize) -> Self {
        self.base_channels = c;
        self
    }

    pub fn with_d_train(mut self, d: usize) -> Self {
        self.d_train = d;
        self
    }

    pub fn with_input_channels(mut self, c: usize) -> Self {
        self.input_channels = c;
        self
    }

    pub fn with_conv_variant(mut self, v: S3ConvVariant) -> Self {
        self.conv_variant = v;
        self
    }

    pub fn with_extra_inner_blocks(mut self, n: usize) -> Self {
        self.extra_inner_blocks = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.n_scales < 2 {
            return Err(Error::Config("n_scales must be at least 2".into()));
        }
        if self.d_train == 0 {
            return Err(Error::Config("d_train must be positive".into()));
        }
        if !(self.input_channels == 1 || self.input_channels == 2) {
            return Err(Error::Config("input_channels must be 1 or 2".into()));
        }
        Ok(())
    }

    /// Spatial extents must divide this for the scale pyramid to close.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.n_scales - 1)
    }
}

/// The assembled network. Parameters live in the companion [`ParamStore`]
/// produced by [`build_model`]; the model itself only holds wiring.
pub struct HsdtModel {
    config: HsdtConfig,
    head: TransformerBlock,
    encoders: Vec<TransformerBlock>,
    inners: Vec<TransformerBlock>,
    decoders: Vec<TransformerBlock>,
    tail: Conv3dLayer,
}

/// Build a freshly initialized model; the same `(config, seed)` pair always
/// produces bitwise-identical parameters.
pub fn build_model<T: Scalar>(
    config: &HsdtConfig,
    seed: u64,
) -> Result<(HsdtModel, ParamStore<T>)> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = stream(seed, LANE_GLOBAL + 1);
    let c = config.base_channels;
    let v = config.conv_variant;
    let d = config.d_train;

    let head = TransformerBlock::new(
        &mut store,
        &mut rng,
        "head.0",
        v,
        config.input_channels,
        c,
        1,
        d,
    )?;
    let mut encoders = Vec::new();
    for i in 0..config.n_scales - 1 {
        encoders.push(TransformerBlock::new(
            &mut store,
            &mut rng,
            &format!("encoder.{i}"),
            v,
            c,
            c,
            2,
            d,
        )?);
    }
    let mut inners = Vec::new();
    for i in 0..config.extra_inner_blocks {
        inners.push(TransformerBlock::new(
            &mut store,
            &mut rng,
            &format!("inner.{i}"),
            v,
            c,
            c,
            1,
            d,
        )?);
    }
    let mut decoders = Vec::new();
    for i in 0..config.n_scales - 1 {
        decoders.push(TransformerBlock::new(
            &mut store,
            &mut rng,
            &format!("decoder.{i}"),
            v,
            c,
            c,
            1,
            d,
        )?);
    }
    let tail = Conv3dLayer::new_zero(&mut store, "tail.0.conv", [1, 1, 1, c, 1], [1, 1, 1], [0, 0, 0])?;

    Ok((
        HsdtModel { config: config.clone(), head, encoders, inners, decoders, tail },
        store,
    ))
}

/// Stack the cube (and optional noise map) into the `[H, W, D, Cin]` layout
/// the head block consumes.
fn build_input<T: Scalar>(
    config: &HsdtConfig,
    hsi: &Tensor<T>,
    noise_map: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let shape = hsi.shape();
    if shape.len() != 3 {
        return Err(Error::contract("forward", "input cube must be [H, W, D]"));
    }
    let multiple = config.spatial_multiple();
    for (axis, &extent) in ["height", "width"].into_iter().zip(shape.iter()) {
        if extent % multiple != 0 {
            return Err(Error::PaddingRequired { axis, extent, multiple });
        }
    }
    let (h, w, d) = (shape[0], shape[1], shape[2]);
    match (config.input_channels, noise_map) {
        (1, None) => hsi.reshaped(&[h, w, d, 1]),
        (1, Some(_)) => Err(Error::contract(
            "forward",
            "this model takes no noise map; build it with input_channels = 2",
        )),
        (2, Some(map)) => {
            if map.shape() != shape {
                return Err(Error::contract(
                    "forward",
                    format!(
                        "noise map shape {:?} does not match cube shape {:?}",
                        map.shape(),
                        shape
                    ),
                ));
            }
            let cube = hsi.data();
            let sigma = map.data();
            let mut out = Vec::with_capacity(cube.len() * 2);
            for i in 0..cube.len() {
                out.push(cube[i]);
                out.push(sigma[i]);
            }
            Tensor::from_vec(&[h, w, d, 2], out)
        }
        (2, None) => Err(Error::contract(
            "forward",
            "this model needs a noise map; pass one or rebuild with input_channels = 1",
        )),
        // validate() pins input_channels to 1 or 2.
        (other, _) => Err(Error::Config(format!("input_channels = {other}"))),
    }
}

impl HsdtModel {
    pub fn config(&self) -> &HsdtConfig {
        &self.config
    }

    /// Blocks in forward order, head first.
    pub fn blocks(&self) -> impl Iterator<Item = &TransformerBlock> {
        std::iter::once(&self.head)
            .chain(self.encoders.iter())
            .chain(self.inners.iter())
            .chain(self.decoders.iter())
    }

    /// Run the network under any runtime. The returned value has the same
    /// `[H, W, D]` shape as the input cube.
    pub fn forward<T: Scalar, R: Ops<T>>(
        &self,
        rt: &mut R,
        bound: &Bound<R::Val>,
        env: &mut ForwardEnv<'_, T>,
        hsi: &Tensor<T>,
        noise_map: Option<&Tensor<T>>,
    ) -> Result<R::Val> {
        let stacked = build_input(&self.config, hsi, noise_map)?;
        let x = rt.leaf(stacked);

        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut cur = self.head.forward(rt, bound, env, &x)?;
        for enc in &self.encoders {
            skips.push(cur.clone());
            cur = enc.forward(rt, bound, env, &cur)?;
        }
        for inner in &self.inners {
            cur = inner.forward(rt, bound, env, &cur)?;
        }
        for dec in &self.decoders {
            let up = rt.trilinear_upsample(&cur, [2, 2, 1])?;
            let skip = skips.pop().expect("one skip per decoder stage");
            let merged = rt.add(&up, &skip)?;
            cur = dec.forward(rt, bound, env, &merged)?;
        }

        let residual = self.tail.forward(rt, bound, &cur)?;
        let shape = hsi.shape().to_vec();
        let residual = rt.reshape(&residual, &shape)?;
        let base = rt.leaf(hsi.clone());
        rt.add(&base, &residual)
    }

    /// Eager eval-mode forward with the fast attention path; applies no
    /// running-statistic updates.
    pub fn infer<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        hsi: &Tensor<T>,
        noise_map: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let mut rt = Eval::new();
        let bound = store.bind(&mut rt);
        let mut env = ForwardEnv::new(store, Mode::Eval, AttnMode::SelfAttn);
        self.forward(&mut rt, &bound, &mut env, hsi, noise_map)
    }

    /// Eval-mode forward that collects every block's `[D, D]` attention map,
    /// labeled by layer name in forward order.
    pub fn attention_maps<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        hsi: &Tensor<T>,
        noise_map: Option<&Tensor<T>>,
        attn: AttnMode,
    ) -> Result<Vec<(String, Tensor<T>)>> {
        let mut rt = Eval::new();
        let bound = store.bind(&mut rt);
        let mut env = ForwardEnv::new(store, Mode::Eval, attn).probing();
        self.forward(&mut rt, &bound, &mut env, hsi, noise_map)?;
        Ok(env.attn_probe.take().expect("probe was enabled"))
    }

    /// Total trainable scalars.
    pub fn count_params<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.trainable_scalars()
    }
}

impl HasParams for HsdtModel {
    fn param_ids(&self) -> Vec<crate::param::ParamId> {
        let mut ids = Vec::new();
        for block in self.blocks() {
            ids.extend(block.param_ids());
        }
        ids.extend(self.tail.param_ids());
        ids
    }
}

/// Little-endian scalar and named-tensor framing shared by the weights file
/// and the checkpoint's optimizer section.
pub(crate) mod wire {
    use super::*;

    fn eof(format: &'static str, detail: &str) -> Error {
        Error::Truncated { format, detail: detail.to_string() }
    }

    pub fn read_bytes<R: Read>(
        r: &mut R,
        n: usize,
        format: &'static str,
        detail: &str,
    ) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                eof(format, detail)
            } else {
                Error::Io(e)
            }
        })?;
        Ok(buf)
    }

    pub fn read_u16<R: Read>(r: &mut R, format: &'static str, what: &str) -> Result<u16> {
        let b = read_bytes(r, 2, format, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn read_u32<R: Read>(r: &mut R, format: &'static str, what: &str) -> Result<u32> {
        let b = read_bytes(r, 4, format, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn read_u64<R: Read>(r: &mut R, format: &'static str, what: &str) -> Result<u64> {
        let b = read_bytes(r, 8, format, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("eight bytes")))
    }

    pub fn expect_magic<R: Read>(
        r: &mut R,
        format: &'static str,
        magic: &'static [u8; 8],
    ) -> Result<()> {
        let got = read_bytes(r, 8, format, "magic")?;
        if got != magic {
            return Err(Error::BadMagic {
                format,
                expected: std::str::from_utf8(magic).expect("ascii magic"),
                got,
            });
        }
        Ok(())
    }

    /// One named tensor: name, rank, extents, then f32 payload.
    pub fn write_entry<T: Scalar, W: Write>(
        w: &mut W,
        name: &str,
        tensor: &Tensor<T>,
    ) -> Result<()> {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::contract("weights", "tensor name too long"));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        let shape = tensor.shape();
        w.write_all(&[shape.len() as u8])?;
        for &e in shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in tensor.data().iter() {
            w.write_all(&v.to_f32().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_entry<R: Read>(
        r: &mut R,
        format: &'static str,
    ) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let name_len = read_u16(r, format, "entry name length")? as usize;
        let name_bytes = read_bytes(r, name_len, format, "entry name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| eof(format, "entry name is not UTF-8"))?;
        let rank = read_bytes(r, 1, format, "entry rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r, format, "entry extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = read_bytes(r, numel * 4, format, &format!("payload of {name}"))?;
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((name, shape, values))
    }
}

/// Serialize every tensor in the store (trainable and running statistics)
/// in creation order.
pub fn save_weights<T: Scalar, W: Write>(w: &mut W, store: &ParamStore<T>) -> Result<()> {
    w.write_all(WEIGHT_MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for id in store.ids() {
        wire::write_entry(w, store.name(id), store.get(id))?;
    }
    Ok(())
}

/// Rebuild a model for `config` and fill it from a weights stream. Every
/// stored tensor must exist in the rebuilt model with a matching shape, and
/// every model tensor must be present in the stream.
pub fn load_weights<T: Scalar, R: Read>(
    r: &mut R,
    config: &HsdtConfig,
) -> Result<(HsdtModel, ParamStore<T>)> {
    const FORMAT: &str = "weights";
    wire::expect_magic(r, FORMAT, WEIGHT_MAGIC)?;
    let count = wire::read_u32(r, FORMAT, "entry count")? as usize;

    let (model, mut store) = build_model::<T>(config, 0)?;
    let mut filled = vec![false; store.len()];
    for _ in 0..count {
        let (name, shape, values) = wire::read_entry(r, FORMAT)?;
        let id = store
            .find(&name)
            .ok_or_else(|| Error::UnknownTensor(name.clone()))?;
        let expected = store.get(id).shape().to_vec();
        if shape != expected {
            return Err(Error::TensorShape { name, stored: shape, expected });
        }
        let data: Vec<T> = values.into_iter().map(T::from_f32).collect();
        store.set(id, Tensor::from_vec(&expected, data)?)?;
        filled[id.index()] = true;
    }
    if let Some(missing) = filled.iter().position(|&f| !f) {
        let name = store
            .ids()
            .nth(missing)
            .map(|id| store.name(id).to_string())
            .unwrap_or_default();
        return Err(Error::MissingTensor(name));
    }
    Ok((model, store))
}
