//! The 16× visual-token compressor.
//!
//! Per sub-image, a toy ViT produces a 16×16 feature map at several depths.
//! The query proposal network turns the deepest map into 8×8 queries
//! (pointwise MLP, 2×2 max pool, dense), which a four-layer bidirectional
//! decoder refines: self-attention across every query of the image, then
//! cross-attention into the encoder depth chosen by the routing table.
//! Decoded queries are reordered from tile-major into whole-image raster
//! order and every 1×4 window along a row is concatenated channel-wise,
//! giving 16 tokens per 224-px tile (a 2×8 pixel-patch window per token).

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::crop::{plan_crop, tile_image, CropConfig, CropPlan};
use crate::error::{bail, Result};
use crate::image::Image;
use crate::nn::{uniform_tensor, Attention, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::spe::{spe_grid, SpeTable};
use crate::tensor::{Tape, Tensor, Var};

/// Tokens concatenated per window in the rearrangement stage.
pub const GROUP: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch: usize,
    pub channels: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch: 14,
            channels: 3,
            width: 32,
            depth: 27,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

/// Decoder layer → encoder layer assignment (0-based block outputs).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingTable {
    entries: Vec<usize>,
}

impl RoutingTable {
    /// Deep-to-shallow, non-increasing encoder indices.
    pub fn new(entries: Vec<usize>) -> Result<Self> {
        if entries.is_empty() {
            bail!(Config, "routing table is empty");
        }
        if entries.windows(2).any(|w| w[1] > w[0]) {
            bail!(Config, "routing {:?} must run deep-to-shallow", entries);
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[usize] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn encoder_layer(&self, decoder_layer: usize) -> usize {
        self.entries[decoder_layer]
    }
}

impl Default for RoutingTable {
    /// Encoder layers 26, 22, 18, 14 for decoder layers 1..4.
    fn default() -> Self {
        Self {
            entries: vec![26, 22, 18, 14],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResamplerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    /// Queries per tile side after pooling.
    pub query_grid: usize,
    /// Composite subsampling window `(rows, cols)` in patch units.
    pub window: (usize, usize),
    pub mlp_ratio: usize,
    pub d_out: usize,
}

impl Default for ResamplerConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            layers: 4,
            query_grid: 8,
            window: (2, 8),
            mlp_ratio: 2,
            d_out: 64,
        }
    }
}

impl ResamplerConfig {
    /// Patch tokens per output token.
    pub fn compression_factor(&self) -> usize {
        self.window.0 * self.window.1
    }
}

/// Encoder feature maps for every tile at every recorded depth.
#[derive(Debug, Clone)]
pub struct VitFeatures {
    recorded_layers: Vec<usize>,
    /// `maps[tile][k]` is `[g, g, width]` for `recorded_layers[k]`.
    maps: Vec<Vec<Var>>,
}

impl VitFeatures {
    pub fn new(recorded_layers: Vec<usize>, maps: Vec<Vec<Var>>) -> Result<Self> {
        if recorded_layers.windows(2).any(|w| w[0] >= w[1]) {
            bail!(
                Config,
                "recorded layers {:?} must be strictly ascending",
                recorded_layers
            );
        }
        if maps.iter().any(|m| m.len() != recorded_layers.len()) {
            bail!(Dimension, "every tile needs one map per recorded layer");
        }
        Ok(Self { recorded_layers, maps })
    }

    pub fn recorded_layers(&self) -> &[usize] {
        &self.recorded_layers
    }

    pub fn tiles(&self) -> usize {
        self.maps.len()
    }

    pub fn map(&self, tile: usize, layer: usize) -> Option<Var> {
        let k = self.recorded_layers.iter().position(|&l| l == layer)?;
        Some(self.maps[tile][k])
    }

    pub fn deepest(&self, tile: usize) -> Var {
        *self.maps[tile].last().expect("at least one recorded layer")
    }
}

/// Patch rows of a tile: `[g·g, patch·patch·channels]`, raster order.
pub fn patchify(img: &Image, patch: usize) -> Result<Tensor> {
    if patch == 0 || img.width() % patch != 0 || img.height() % patch != 0 {
        bail!(
            Dimension,
            "{}x{} image is not divisible into {patch}-px patches",
            img.width(),
            img.height()
        );
    }
    let (gw, gh, c) = (img.width() / patch, img.height() / patch, img.channels());
    let mut data = Vec::with_capacity(img.data().len());
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                for x in 0..patch {
                    data.extend_from_slice(img.pixel(px * patch + x, py * patch + y));
                }
            }
        }
    }
    Tensor::new([gw * gh, patch * patch * c], data)
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.ln1.forward(tape, x)?;
        let a = self.attn.forward(tape, h, h, None)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, x)?;
        let m = self.mlp.forward(tape, h)?;
        tape.add(x, m)
    }
}

/// Randomly initialized pre-norm ViT standing in for a pretrained encoder.
#[derive(Debug, Clone)]
pub struct ToyVit {
    cfg: EncoderConfig,
    grid: usize,
    patch_embed: Linear,
    pos: ParamId,
    blocks: Vec<Block>,
}

impl ToyVit {
    pub fn new(cfg: EncoderConfig, tile_px: usize, store: &mut ParamStore, rng: &mut SplitMix64) -> Result<Self> {
        if cfg.depth == 0 || cfg.patch == 0 || tile_px % cfg.patch != 0 {
            bail!(Config, "encoder needs depth >= 1 and a patch size dividing {tile_px}");
        }
        let grid = tile_px / cfg.patch;
        let patch_embed = Linear::new(
            store,
            "vit.patch_embed",
            cfg.patch * cfg.patch * cfg.channels,
            cfg.width,
            rng,
        );
        let pos = store.add("vit.pos", uniform_tensor(&[grid * grid, cfg.width], 0.1, rng));
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let name = alloc::format!("vit.block{i}");
            blocks.push(Block {
                ln1: LayerNorm::new(store, &alloc::format!("{name}.ln1"), cfg.width),
                attn: Attention::new(
                    store,
                    &alloc::format!("{name}.attn"),
                    cfg.width,
                    cfg.width,
                    cfg.heads,
                    rng,
                )?,
                ln2: LayerNorm::new(store, &alloc::format!("{name}.ln2"), cfg.width),
                mlp: Mlp::new(
                    store,
                    &alloc::format!("{name}.mlp"),
                    cfg.width,
                    cfg.width * cfg.mlp_ratio,
                    cfg.width,
                    rng,
                ),
            });
        }
        Ok(Self {
            cfg,
            grid,
            patch_embed,
            pos,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Feature-map side in patches.
    pub fn grid(&self) -> usize {
        self.grid
    }

    /// Runs one tile and returns `[g, g, width]` maps after each block in
    /// `record` (ascending, 0-based).
    pub fn forward(&self, tape: &mut Tape, tile: &Image, record: &[usize]) -> Result<Vec<Var>> {
        if let Some(&bad) = record.iter().find(|&&l| l >= self.cfg.depth) {
            bail!(Config, "encoder layer {bad} requested but depth is {}", self.cfg.depth);
        }
        let patches = patchify(tile, self.cfg.patch)?;
        if patches.shape()[0] != self.grid * self.grid || tile.channels() != self.cfg.channels {
            bail!(
                Dimension,
                "tile {}x{}x{} does not match encoder input",
                tile.width(),
                tile.height(),
                tile.channels()
            );
        }
        let p = tape.constant(patches);
        let x = self.patch_embed.forward(tape, p)?;
        let mut x = tape.add(x, tape.param(self.pos))?;
        let mut out = Vec::with_capacity(record.len());
        let last = record.iter().copied().max().unwrap_or(0);
        for (i, block) in self.blocks.iter().enumerate().take(last + 1) {
            x = block.forward(tape, x)?;
            if record.contains(&i) {
                out.push(tape.reshape(x, &[self.grid, self.grid, self.cfg.width])?);
            }
        }
        Ok(out)
    }
}

/// Query proposal network: pointwise MLP, 2×2 max pool, dense.
#[derive(Debug, Clone, Copy)]
pub struct Qpn {
    mlp: Mlp,
    dense: Linear,
    d_model: usize,
}

impl Qpn {
    pub fn new(store: &mut ParamStore, d_feat: usize, d_model: usize, rng: &mut SplitMix64) -> Self {
        Self {
            mlp: Mlp::new(store, "qpn.mlp", d_feat, d_model, d_model, rng),
            dense: Linear::new(store, "qpn.dense", d_model, d_model, rng),
            d_model,
        }
    }

    /// `[h, w, D]` features → `[h/2, w/2, d_model]` queries.
    pub fn queries(&self, tape: &mut Tape, feat: Var) -> Result<Var> {
        let s = tape.shape(feat).to_vec();
        if s.len() != 3 {
            bail!(Dimension, "QPN expects [h, w, d] features, got {:?}", s);
        }
        let (h, w, d) = (s[0], s[1], s[2]);
        if h % 2 != 0 || w % 2 != 0 {
            bail!(Dimension, "QPN needs even spatial extents, got {h}x{w}");
        }
        let flat = tape.reshape(feat, &[h * w, d])?;
        let m = self.mlp.forward(tape, flat)?;
        let m = tape.reshape(m, &[h, w, self.d_model])?;
        let pooled = tape.max_pool_2x2(m)?;
        let pooled = tape.reshape(pooled, &[h * w / 4, self.d_model])?;
        let q = self.dense.forward(tape, pooled)?;
        tape.reshape(q, &[h / 2, w / 2, self.d_model])
    }
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    ln_kv: LayerNorm,
    cross_attn: Attention,
    ln_mlp: LayerNorm,
    mlp: Mlp,
}

/// Attention matrices captured during a decoder pass.
#[derive(Debug, Clone, Default)]
pub struct DecoderTrace {
    /// One `[Q, Q]` matrix per head per layer.
    pub self_weights: Vec<Var>,
    /// One `[q_tile, m_tile]` matrix per head per tile per layer.
    pub cross_weights: Vec<Var>,
}

/// Bidirectional decoder with per-layer cross-attention memories.
#[derive(Debug, Clone)]
pub struct Decoder {
    layers: Vec<DecoderLayer>,
    d_model: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &ResamplerConfig, d_feat: usize, rng: &mut SplitMix64) -> Result<Self> {
        let d = cfg.d_model;
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let name = alloc::format!("decoder.layer{i}");
            layers.push(DecoderLayer {
                ln_self: LayerNorm::new(store, &alloc::format!("{name}.ln_self"), d),
                self_attn: Attention::new(store, &alloc::format!("{name}.self_attn"), d, d, cfg.heads, rng)?,
                ln_cross: LayerNorm::new(store, &alloc::format!("{name}.ln_cross"), d),
                ln_kv: LayerNorm::new(store, &alloc::format!("{name}.ln_kv"), d_feat),
                cross_attn: Attention::new(store, &alloc::format!("{name}.cross_attn"), d, d_feat, cfg.heads, rng)?,
                ln_mlp: LayerNorm::new(store, &alloc::format!("{name}.ln_mlp"), d),
                mlp: Mlp::new(store, &alloc::format!("{name}.mlp"), d, d * cfg.mlp_ratio, d, rng),
            });
        }
        Ok(Self { layers, d_model: d })
    }

    pub fn layers(&self) -> usize {
        self.layers.len()
    }

    /// Zeroes every projection that writes into the residual stream.
    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        for l in &self.layers {
            l.self_attn.o.zero(store);
            l.cross_attn.o.zero(store);
            l.mlp.fc2.zero(store);
        }
    }

    /// Core decoder pass.
    ///
    /// `queries` is `[Q, d_model]`, split into `memory[ℓ].len()` equal
    /// contiguous groups; group `k` cross-attends to `memory[ℓ][k]` (`[m, D]`)
    /// in layer `ℓ`. `positions` (`[Q, d_model]`) is added before layer 1.
    pub fn forward_with_positions(
        &self,
        tape: &mut Tape,
        queries: Var,
        positions: &Tensor,
        memory: &[Vec<Var>],
        mut trace: Option<&mut DecoderTrace>,
    ) -> Result<Var> {
        let qs = tape.shape(queries).to_vec();
        if qs.len() != 2 || qs[1] != self.d_model {
            bail!(Dimension, "decoder queries must be [Q, {}], got {:?}", self.d_model, qs);
        }
        if positions.shape() != qs.as_slice() {
            bail!(
                Dimension,
                "positions {:?} must match queries {:?}",
                positions.shape(),
                qs
            );
        }
        if memory.len() != self.layers.len() {
            bail!(
                Config,
                "{} cross-attention memories for {} layers",
                memory.len(),
                self.layers.len()
            );
        }
        let pos = tape.constant(positions.clone());
        let mut x = tape.add(queries, pos)?;
        for (layer, mem) in self.layers.iter().zip(memory) {
            let groups = mem.len();
            if groups == 0 || qs[0] % groups != 0 {
                bail!(Dimension, "{} queries cannot be split across {groups} memories", qs[0]);
            }
            let per = qs[0] / groups;

            let h = layer.ln_self.forward(tape, x)?;
            let a = layer
                .self_attn
                .forward(tape, h, h, trace.as_deref_mut().map(|t| &mut t.self_weights))?;
            x = tape.add(x, a)?;

            let h = layer.ln_cross.forward(tape, x)?;
            let mut outs = Vec::with_capacity(groups);
            for (k, &kv) in mem.iter().enumerate() {
                let hk = if groups == 1 {
                    h
                } else {
                    tape.slice(h, 0, k * per, per)?
                };
                let kv = layer.ln_kv.forward(tape, kv)?;
                outs.push(layer.cross_attn.forward(
                    tape,
                    hk,
                    kv,
                    trace.as_deref_mut().map(|t| &mut t.cross_weights),
                )?);
            }
            let c = if groups == 1 { outs[0] } else { tape.concat(&outs, 0)? };
            x = tape.add(x, c)?;

            let h = layer.ln_mlp.forward(tape, x)?;
            let m = layer.mlp.forward(tape, h)?;
            x = tape.add(x, m)?;
        }
        Ok(x)
    }
}

/// Tile-major query layout of one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryLayout {
    pub rows: usize,
    pub cols: usize,
    pub tile_h: usize,
    pub tile_w: usize,
}

impl QueryLayout {
    pub fn new(rows: usize, cols: usize, query_grid: usize) -> Self {
        Self {
            rows,
            cols,
            tile_h: query_grid,
            tile_w: query_grid,
        }
    }

    pub fn tiles(&self) -> usize {
        self.rows * self.cols
    }

    pub fn len(&self) -> usize {
        self.tiles() * self.tile_h * self.tile_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn global_width(&self) -> usize {
        self.cols * self.tile_w
    }

    /// Whole-image raster position of tile-major token `index`.
    pub fn global_position(&self, index: usize) -> usize {
        let per = self.tile_h * self.tile_w;
        let (tile, local) = (index / per, index % per);
        let (a, b) = (tile / self.cols, tile % self.cols);
        let (y, x) = (local / self.tile_w, local % self.tile_w);
        (a * self.tile_h + y) * self.global_width() + b * self.tile_w + x
    }
}

/// Tile-major index → whole-image raster index, for 8×8 queries per tile.
pub fn rearrange_permutation(rows: usize, cols: usize) -> Vec<usize> {
    let layout = QueryLayout::new(rows, cols, 8);
    layout_permutation(&layout)
}

pub fn layout_permutation(layout: &QueryLayout) -> Vec<usize> {
    (0..layout.len()).map(|i| layout.global_position(i)).collect()
}

/// Inverse of a permutation: `order[perm[i]] = i`.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Concatenates each run of four consecutive raster tokens channel-wise.
///
/// `row_width` is the global raster row length; windows never straddle rows.
pub fn group_concat(tape: &mut Tape, tokens: Var, row_width: usize) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 2 {
        bail!(Dimension, "group_concat expects [N, d], got {:?}", s);
    }
    if s[0] % GROUP != 0 {
        bail!(Dimension, "{} tokens are not divisible into groups of {GROUP}", s[0]);
    }
    if row_width == 0 || row_width % GROUP != 0 || s[0] % row_width != 0 {
        bail!(
            Dimension,
            "raster rows of {row_width} tokens cannot be grouped by {GROUP}"
        );
    }
    tape.reshape(tokens, &[s[0] / GROUP, GROUP * s[1]])
}

/// QPN + decoder + rearrangement + output projection.
#[derive(Debug, Clone)]
pub struct Resampler {
    cfg: ResamplerConfig,
    qpn: Qpn,
    decoder: Decoder,
    routing: RoutingTable,
    spe: SpeTable,
    out: Linear,
}

impl Resampler {
    pub fn new(
        cfg: ResamplerConfig,
        routing: RoutingTable,
        d_feat: usize,
        store: &mut ParamStore,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if routing.len() != cfg.layers {
            bail!(
                Config,
                "routing has {} entries for {} decoder layers",
                routing.len(),
                cfg.layers
            );
        }
        if cfg.compression_factor() != 4 * GROUP || cfg.window.1 != 2 * GROUP {
            bail!(Config, "subsampling window {:?} must be 2x{}", cfg.window, 2 * GROUP);
        }
        let qpn = Qpn::new(store, d_feat, cfg.d_model, rng);
        let decoder = Decoder::new(store, &cfg, d_feat, rng)?;
        let spe = SpeTable::random(cfg.d_model, cfg.heads, rng)?;
        let out = Linear::new(store, "resampler.out", GROUP * cfg.d_model, cfg.d_out, rng);
        Ok(Self {
            cfg,
            qpn,
            decoder,
            routing,
            spe,
            out,
        })
    }

    pub fn config(&self) -> &ResamplerConfig {
        &self.cfg
    }

    pub fn routing(&self) -> &RoutingTable {
        &self.routing
    }

    pub fn spe(&self) -> &SpeTable {
        &self.spe
    }

    pub fn qpn(&self) -> &Qpn {
        &self.qpn
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Position embedding of every tile-major query of `layout`.
    pub fn query_positions(&self, layout: &QueryLayout) -> Result<Tensor> {
        let grid = spe_grid(&self.spe, layout.rows * layout.tile_h, layout.global_width())?;
        let d = grid.last_dim();
        let mut data = Vec::with_capacity(layout.len() * d);
        for i in 0..layout.len() {
            data.extend_from_slice(grid.row(layout.global_position(i)));
        }
        Tensor::new([layout.len(), d], data)
    }

    /// Refines tile-major `queries` against the routed encoder features.
    pub fn decoder_forward(
        &self,
        tape: &mut Tape,
        queries: Var,
        feats: &VitFeatures,
        layout: &QueryLayout,
        trace: Option<&mut DecoderTrace>,
    ) -> Result<Var> {
        if feats.tiles() != layout.tiles() {
            bail!(
                Dimension,
                "{} feature tiles for a {}x{} layout",
                feats.tiles(),
                layout.rows,
                layout.cols
            );
        }
        let mut memory = Vec::with_capacity(self.routing.len());
        for &enc in self.routing.entries() {
            let mut per_tile = Vec::with_capacity(feats.tiles());
            for t in 0..feats.tiles() {
                let Some(map) = feats.map(t, enc) else {
                    bail!(
                        Config,
                        "routing references encoder layer {enc}, recorded {:?}",
                        feats.recorded_layers()
                    );
                };
                let s = tape.shape(map).to_vec();
                per_tile.push(tape.reshape(map, &[s[0] * s[1], s[2]])?);
            }
            memory.push(per_tile);
        }
        let positions = self.query_positions(layout)?;
        self.decoder
            .forward_with_positions(tape, queries, &positions, &memory, trace)
    }

    /// Full resampling of one image's features into `[16·tiles, d_out]` tokens.
    pub fn compress(&self, tape: &mut Tape, feats: &VitFeatures, rows: usize, cols: usize) -> Result<Var> {
        let layout = QueryLayout::new(rows, cols, self.cfg.query_grid);
        let mut per_tile = Vec::with_capacity(feats.tiles());
        for t in 0..feats.tiles() {
            let q = self.qpn.queries(tape, feats.deepest(t))?;
            let s = tape.shape(q).to_vec();
            if s[0] != layout.tile_h || s[1] != layout.tile_w {
                bail!(
                    Config,
                    "QPN produced {}x{} queries, layout expects {}x{}",
                    s[0],
                    s[1],
                    layout.tile_h,
                    layout.tile_w
                );
            }
            per_tile.push(tape.reshape(q, &[s[0] * s[1], s[2]])?);
        }
        let queries = if per_tile.len() == 1 {
            per_tile[0]
        } else {
            tape.concat(&per_tile, 0)?
        };
        let decoded = self.decoder_forward(tape, queries, feats, &layout, None)?;
        let order = invert_permutation(&layout_permutation(&layout));
        let raster = tape.gather_rows(decoded, &order)?;
        let grouped = group_concat(tape, raster, layout.global_width())?;
        self.out.forward(tape, grouped)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub crop: CropConfig,
    pub encoder: EncoderConfig,
    pub resampler: ResamplerConfig,
}

/// Image → visual tokens: crop, encode, resample, rearrange.
#[derive(Debug, Clone)]
pub struct Frontend {
    cfg: FrontendConfig,
    encoder: ToyVit,
    resampler: Resampler,
    record: Vec<usize>,
}

/// Output of [`Frontend::forward`].
#[derive(Debug, Clone)]
pub struct Compressed {
    pub tokens: Var,
    pub plan: CropPlan,
}

impl Frontend {
    pub fn new(
        cfg: FrontendConfig,
        routing: RoutingTable,
        store: &mut ParamStore,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        cfg.crop.validate()?;
        let encoder = ToyVit::new(cfg.encoder, cfg.crop.tile_px, store, rng)?;
        if encoder.grid() != 2 * cfg.resampler.query_grid {
            bail!(
                Config,
                "encoder grid {} must be twice the query grid {}",
                encoder.grid(),
                cfg.resampler.query_grid
            );
        }
        let mut record = routing.entries().to_vec();
        record.push(cfg.encoder.depth - 1);
        record.sort_unstable();
        record.dedup();
        if let Some(&bad) = record.iter().find(|&&l| l >= cfg.encoder.depth) {
            bail!(
                Config,
                "routing references encoder layer {bad} but depth is {}",
                cfg.encoder.depth
            );
        }
        let resampler = Resampler::new(cfg.resampler, routing, cfg.encoder.width, store, rng)?;
        Ok(Self {
            cfg,
            encoder,
            resampler,
            record,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &ToyVit {
        &self.encoder
    }

    pub fn resampler(&self) -> &Resampler {
        &self.resampler
    }

    /// Encoder depths kept for the resampler (routing targets plus the last block).
    pub fn recorded_layers(&self) -> &[usize] {
        &self.record
    }

    /// Whole pipeline on one tape; gradients reach every parameter.
    pub fn forward(&self, tape: &mut Tape, img: &Image) -> Result<Compressed> {
        self.run(tape, img, |tape, tile| self.encoder.forward(tape, tile, &self.record))
    }

    /// Inference: each tile's encoder pass runs on a scratch tape and only
    /// the recorded maps are kept.
    pub fn compress(&self, store: &ParamStore, img: &Image) -> Result<(Tensor, CropPlan)> {
        let mut tape = Tape::with_params(store, false);
        let out = self.run(&mut tape, img, |tape, tile| {
            let mut scratch = Tape::with_params(store, false);
            let maps = self.encoder.forward(&mut scratch, tile, &self.record)?;
            Ok(maps
                .into_iter()
                .map(|m| tape.constant(scratch.value(m).clone()))
                .collect())
        })?;
        Ok((tape.value(out.tokens).clone(), out.plan))
    }

    fn run(
        &self,
        tape: &mut Tape,
        img: &Image,
        mut encode: impl FnMut(&mut Tape, &Image) -> Result<Vec<Var>>,
    ) -> Result<Compressed> {
        let plan = plan_crop(img.width(), img.height(), &self.cfg.crop)?;
        let tiles = tile_image(img, &plan, &self.cfg.crop)?;
        let maps = tiles
            .sub_images
            .iter()
            .map(|t| encode(tape, t))
            .collect::<Result<Vec<_>>>()?;
        let feats = VitFeatures::new(self.record.clone(), maps)?;
        let mut tokens = self.resampler.compress(tape, &feats, plan.rows, plan.cols)?;
        if let Some(thumb) = &tiles.thumbnail {
            let maps = encode(tape, thumb)?;
            let feats = VitFeatures::new(self.record.clone(), vec![maps])?;
            let t = self.resampler.compress(tape, &feats, 1, 1)?;
            tokens = tape.concat(&[tokens, t], 0)?;
        }
        Ok(Compressed { tokens, plan })
    }
}
