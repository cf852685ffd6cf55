//! `author`: platonic layer corpora and ground-truth composites.

use std::path::{Path, PathBuf};

use clap::Args;
use layerforge::authoring::{
    item_spec, make_composite, render_item, CorpusPreset, DetailSpec, ItemSpec, LayerKind, MondrianSpec, ShadingSpec,
};
use layerforge::imageio::{write_png16, write_rawf};
use layerforge::vae::derive_seed;
use layerforge::{Real, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::runlog::{self, config_error, Context};

pub const CORPUS_FILE: &str = "corpus.json";
const DEFAULT_COMPOSITES: usize = 20;

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct AuthorArgs {
    /// What to author.
    #[arg(long, value_parser = ["albedo", "shading", "detail", "composite"])]
    pub kind: String,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,

    /// Corpus sizes and extents: paper or desk.
    #[arg(long, default_value = "desk")]
    pub preset: String,

    /// Seed for every generated item.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Number of items; defaults to the preset count, or 20 composites.
    #[arg(long)]
    pub n: Option<usize>,

    /// Composite side length; defaults to the preset training patch size.
    #[arg(long)]
    pub size: Option<usize>,

    /// Multiply composites by a detail swatch as a third layer.
    #[arg(long)]
    pub with_detail: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerItem {
    pub image: String,
    pub mask: Option<String>,
    pub spec: ItemSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompositeItem {
    pub dir: String,
    pub seed: u64,
    pub albedo: MondrianSpec,
    pub shading: ShadingSpec,
    pub detail: Option<DetailSpec>,
}

/// The JSON sidecar of an authored corpus.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusManifest {
    Layer { layer: LayerKind, preset: CorpusPreset, seed: u64, items: Vec<LayerItem> },
    Composite { size: usize, fill: Real, seed: u64, with_detail: bool, items: Vec<CompositeItem> },
}

fn save_pair(dir: &Path, stem: &str, image: &Tensor) -> anyhow::Result<()> {
    write_png16(&dir.join(format!("{stem}.png")), image)?;
    write_rawf(&dir.join(format!("{stem}.rawf")), image)?;
    Ok(())
}

pub fn run(args: AuthorArgs, ctx: &Context) -> anyhow::Result<()> {
    let mut preset = CorpusPreset::by_name(&args.preset)?;
    runlog::create_dir(&args.out)?;
    let manifest = if args.kind == "composite" {
        let n = args.n.unwrap_or(DEFAULT_COMPOSITES);
        let size = args.size.unwrap_or(preset.patch);
        if size < 8 {
            return Err(config_error(format!("composite size {size} is too small")).into());
        }
        runlog::write(&args.out.join("run.json"), ctx, &serde_json::json!({ "n": n, "size": size, "fill": preset.fill }))?;
        let seeds: Vec<u64> = (0..n as u64).map(|i| derive_seed(&[args.seed, 0xC0, i])).collect();
        let comps = seeds
            .par_iter()
            .map(|&s| make_composite(size, s, preset.fill, args.with_detail))
            .collect::<layerforge::Result<Vec<_>>>()?;
        let mut items = Vec::with_capacity(n);
        for (i, (c, seed)) in comps.into_iter().zip(seeds).enumerate() {
            let name = format!("comp_{i:04}");
            let dir = args.out.join(&name);
            runlog::create_dir(&dir)?;
            save_pair(&dir, "image", &c.image)?;
            save_pair(&dir, "albedo", &c.albedo)?;
            save_pair(&dir, "shading", &c.shading)?;
            if let Some(d) = &c.detail {
                save_pair(&dir, "detail", d)?;
            }
            items.push(CompositeItem {
                dir: name,
                seed,
                albedo: c.albedo_spec,
                shading: c.shading_spec,
                detail: c.detail_spec,
            });
        }
        CorpusManifest::Composite { size, fill: preset.fill, seed: args.seed, with_detail: args.with_detail, items }
    } else {
        let kind = LayerKind::parse(&args.kind)?;
        if let Some(n) = args.n {
            match kind {
                LayerKind::Albedo => preset.albedo_count = n,
                LayerKind::Shading => preset.shading_count = n,
                LayerKind::Detail => preset.detail_count = n,
            }
        }
        runlog::write(&args.out.join("run.json"), ctx, &preset)?;
        let rendered = (0..preset.count(kind))
            .into_par_iter()
            .map(|i| render_item(&item_spec(kind, &preset, args.seed, i)))
            .collect::<layerforge::Result<Vec<_>>>()?;
        let mut items = Vec::with_capacity(rendered.len());
        for (i, item) in rendered.into_iter().enumerate() {
            let stem = format!("{}_{i:04}", kind.name());
            write_png16(&args.out.join(format!("{stem}.png")), &item.image)?;
            let mask = match &item.mask {
                Some(m) => {
                    let name = format!("{stem}_mask.png");
                    write_png16(&args.out.join(&name), m)?;
                    Some(name)
                }
                None => None,
            };
            items.push(LayerItem { image: format!("{stem}.png"), mask, spec: item.spec });
        }
        CorpusManifest::Layer { layer: kind, preset, seed: args.seed, items }
    };
    runlog::write_json(&args.out.join(CORPUS_FILE), &manifest)?;
    log::info!("authored {} corpus in {}", args.kind, args.out.display());
    Ok(())
}

/// Reads the sidecar of a layer corpus together with its images and masks.
pub fn load_layer_corpus(dir: &Path) -> anyhow::Result<(LayerKind, CorpusPreset, u64, Vec<Tensor>, Vec<Option<Tensor>>)> {
    let manifest: CorpusManifest = runlog::read_json(&dir.join(CORPUS_FILE))?;
    let CorpusManifest::Layer { layer, preset, seed, items } = manifest else {
        return Err(config_error(format!("{} holds composites, not a layer corpus", dir.display())).into());
    };
    let mut images = Vec::with_capacity(items.len());
    let mut masks = Vec::with_capacity(items.len());
    for it in &items {
        images.push(layerforge::imageio::read_png(&dir.join(&it.image))?);
        masks.push(match &it.mask {
            Some(m) => Some(layerforge::imageio::read_png(&dir.join(m))?),
            None => None,
        });
    }
    Ok((layer, preset, seed, images, masks))
}
