use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{render_glyph, CharId, GlyphImage, GlyphSpec, StyleId, StyleSpec};
use crate::error::{ensure, Error, Result};
use crate::par::{self, Execution};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Fractions of characters and of non-canonical styles assigned to the seen
/// and unseen splits. Each axis must sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub seen_chars: f64,
    pub unseen_chars: f64,
    pub seen_styles: f64,
    pub unseen_styles: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            seen_chars: 0.8,
            unseen_chars: 0.2,
            seen_styles: 0.75,
            unseen_styles: 0.25,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.seen_chars,
            self.unseen_chars,
            self.seen_styles,
            self.unseen_styles,
        ];
        ensure!(
            all.iter().all(|r| r.is_finite() && *r >= 0.0),
            Validation,
            "split ratios must be non-negative: {self:?}"
        );
        ensure!(
            (self.seen_chars + self.unseen_chars - 1.0).abs() < 1e-9,
            Validation,
            "character split ratios sum to {}, expected 1",
            self.seen_chars + self.unseen_chars
        );
        ensure!(
            (self.seen_styles + self.unseen_styles - 1.0).abs() < 1e-9,
            Validation,
            "style split ratios sum to {}, expected 1",
            self.seen_styles + self.unseen_styles
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub seen_chars: Vec<CharId>,
    pub unseen_chars: Vec<CharId>,
    pub seen_styles: Vec<StyleId>,
    pub unseen_styles: Vec<StyleId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Directory holding the manifest; set on load, never serialized.
    #[serde(skip)]
    pub root: PathBuf,
    pub image_size: usize,
    pub seed: u64,
    pub canonical_style_id: StyleId,
    pub chars: Vec<CharId>,
    pub styles: Vec<StyleId>,
    /// Generator parameters per style; empty for ingested corpora.
    #[serde(default)]
    pub style_specs: Vec<StyleSpec>,
    pub splits: Splits,
}

fn split_count(n: usize, unseen_ratio: f64, axis: &str) -> Result<usize> {
    let unseen = (unseen_ratio * n as f64).round() as usize;
    ensure!(
        unseen >= 1 && unseen < n,
        Validation,
        "{axis} split of {n} items leaves {unseen} unseen and {} seen; both must be non-empty",
        n.saturating_sub(unseen)
    );
    Ok(unseen)
}

fn make_splits(
    chars: &[CharId],
    targets: &[StyleId],
    ratios: &SplitRatios,
    seed: u64,
) -> Result<Splits> {
    ratios.validate()?;
    let unseen_c = split_count(chars.len(), ratios.unseen_chars, "character")?;
    let unseen_s = split_count(targets.len(), ratios.unseen_styles, "style")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5917);
    let mut c = chars.to_vec();
    c.shuffle(&mut rng);
    let mut s = targets.to_vec();
    s.shuffle(&mut rng);
    let sorted = |v: &[u32]| {
        let mut v = v.to_vec();
        v.sort_unstable();
        v
    };
    Ok(Splits {
        unseen_chars: sorted(&c[..unseen_c]),
        seen_chars: sorted(&c[unseen_c..]),
        unseen_styles: sorted(&s[..unseen_s]),
        seen_styles: sorted(&s[unseen_s..]),
    })
}

/// Evaluation setting crossing seen/unseen characters with seen/unseen styles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Setting {
    SCSF,
    UCSF,
    SCUF,
    UCUF,
}

impl Setting {
    pub const ALL: [Setting; 4] = [Self::SCSF, Self::UCSF, Self::SCUF, Self::UCUF];

    pub fn chars(self, m: &DatasetManifest) -> &[CharId] {
        match self {
            Self::SCSF | Self::SCUF => &m.splits.seen_chars,
            Self::UCSF | Self::UCUF => &m.splits.unseen_chars,
        }
    }

    pub fn styles(self, m: &DatasetManifest) -> &[StyleId] {
        match self {
            Self::SCSF | Self::UCSF => &m.splits.seen_styles,
            Self::SCUF | Self::UCUF => &m.splits.unseen_styles,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SCSF => "SCSF",
            Self::UCSF => "UCSF",
            Self::SCUF => "SCUF",
            Self::UCUF => "UCUF",
        }
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::validation(format!("unknown setting {s:?}")))
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let sc: BTreeSet<_> = self.splits.seen_chars.iter().collect();
        let uc: BTreeSet<_> = self.splits.unseen_chars.iter().collect();
        let ss: BTreeSet<_> = self.splits.seen_styles.iter().collect();
        let us: BTreeSet<_> = self.splits.unseen_styles.iter().collect();
        ensure!(sc.is_disjoint(&uc), Validation, "seen and unseen chars overlap");
        ensure!(ss.is_disjoint(&us), Validation, "seen and unseen styles overlap");
        let canon = &self.canonical_style_id;
        ensure!(
            !ss.contains(canon) && !us.contains(canon),
            Validation,
            "canonical style {canon} must not be a target style"
        );
        ensure!(
            self.styles.contains(canon),
            Validation,
            "canonical style {canon} missing from style list"
        );
        let chars: BTreeSet<_> = self.chars.iter().collect();
        ensure!(
            sc.iter().chain(uc.iter()).all(|c| chars.contains(c)),
            Validation,
            "split references an unknown char id"
        );
        let styles: BTreeSet<_> = self.styles.iter().collect();
        ensure!(
            ss.iter().chain(us.iter()).all(|s| styles.contains(s)),
            Validation,
            "split references an unknown style id"
        );
        Ok(())
    }

    pub fn image_path(&self, style: StyleId, ch: CharId) -> PathBuf {
        self.root.join(style.to_string()).join(format!("{ch}.png"))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: Self = serde_json::from_str(&text)?;
        m.root = root.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_json()? + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Non-canonical styles.
    pub fn target_styles(&self) -> Vec<StyleId> {
        self.styles
            .iter()
            .copied()
            .filter(|s| *s != self.canonical_style_id)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetParams {
    pub num_chars: usize,
    pub num_styles: usize,
    pub size: usize,
    pub split_ratios: SplitRatios,
    pub seed: u64,
}

/// In-memory view of a dataset: manifest plus every rendered image.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: DatasetManifest,
    images: HashMap<(StyleId, CharId), GlyphImage>,
}

impl Corpus {
    pub fn from_parts(
        manifest: DatasetManifest,
        images: impl IntoIterator<Item = GlyphImage>,
    ) -> Result<Self> {
        manifest.validate()?;
        let images: HashMap<_, _> = images
            .into_iter()
            .map(|img| ((img.style_id, img.char_id), img))
            .collect();
        for &s in &manifest.styles {
            for &c in &manifest.chars {
                ensure!(
                    images.contains_key(&(s, c)),
                    Validation,
                    "corpus is missing style {s} char {c}"
                );
            }
        }
        Ok(Self { manifest, images })
    }

    /// Reads every image listed by the manifest.
    pub fn load(manifest: DatasetManifest) -> Result<Self> {
        let keys: Vec<(StyleId, CharId)> = manifest
            .styles
            .iter()
            .flat_map(|&s| manifest.chars.iter().map(move |&c| (s, c)))
            .collect();
        let m = &manifest;
        let images = par::try_map(Execution::current(), &keys, |&(s, c)| {
            let img = GlyphImage::load_png(&m.image_path(s, c), c, s)?;
            ensure!(
                img.size() == m.image_size,
                Validation,
                "image {s}/{c} is {}px, manifest says {}",
                img.size(),
                m.image_size
            );
            Ok(img)
        })?;
        Self::from_parts(manifest, images)
    }

    pub fn image(&self, style: StyleId, ch: CharId) -> Result<&GlyphImage> {
        self.images
            .get(&(style, ch))
            .ok_or_else(|| Error::validation(format!("no image for style {style} char {ch}")))
    }

    pub fn canonical(&self, ch: CharId) -> Result<&GlyphImage> {
        self.image(self.manifest.canonical_style_id, ch)
    }

    pub fn image_size(&self) -> usize {
        self.manifest.image_size
    }
}

/// Generates the synthetic corpus in memory. Style 0 is canonical.
pub fn render_corpus(params: &DatasetParams) -> Result<Corpus> {
    ensure!(
        params.num_chars >= 4,
        Validation,
        "need at least 4 characters, got {}",
        params.num_chars
    );
    ensure!(
        params.num_styles >= 3,
        Validation,
        "need at least 3 styles (canonical, seen, unseen), got {}",
        params.num_styles
    );
    ensure!(
        super::SUPPORTED_SIZES.contains(&params.size),
        Config,
        "unsupported image size {}",
        params.size
    );
    let chars: Vec<CharId> = (0..params.num_chars as CharId).collect();
    let styles: Vec<StyleId> = (0..params.num_styles as StyleId).collect();
    let splits = make_splits(&chars, &styles[1..], &params.split_ratios, params.seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut style_specs = vec![StyleSpec::canonical(0)];
    style_specs.extend(styles[1..].iter().map(|&s| StyleSpec::random(s, &mut rng)));
    let glyphs: Vec<GlyphSpec> = chars
        .iter()
        .map(|&c| GlyphSpec::generate(c, params.seed))
        .collect();

    let jobs: Vec<(usize, usize)> = (0..styles.len())
        .flat_map(|s| (0..chars.len()).map(move |c| (s, c)))
        .collect();
    let images = par::try_map(Execution::current(), &jobs, |&(s, c)| {
        render_glyph(&glyphs[c], &style_specs[s], params.size)
    })?;

    let manifest = DatasetManifest {
        root: PathBuf::new(),
        image_size: params.size,
        seed: params.seed,
        canonical_style_id: 0,
        chars,
        styles,
        style_specs,
        splits,
    };
    Corpus::from_parts(manifest, images)
}

fn write_images(root: &Path, corpus: &Corpus) -> Result<()> {
    let m = &corpus.manifest;
    for &s in &m.styles {
        let dir = root.join(s.to_string());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let keys: Vec<(StyleId, CharId)> = m
        .styles
        .iter()
        .flat_map(|&s| m.chars.iter().map(move |&c| (s, c)))
        .collect();
    par::try_map(Execution::current(), &keys, |&(s, c)| {
        corpus.image(s, c)?.save_png(&m.image_path(s, c))
    })?;
    Ok(())
}

/// Renders the synthetic corpus to `root/<style_id>/<char_id>.png` and writes
/// `root/manifest.json`.
pub fn build_dataset(root: &Path, params: &DatasetParams) -> Result<DatasetManifest> {
    let mut corpus = render_corpus(params)?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    corpus.manifest.root = root.to_path_buf();
    write_images(root, &corpus)?;
    corpus.manifest.save()?;
    Ok(corpus.manifest)
}

fn numeric_entries(dir: &Path, want_dirs: bool) -> Result<Vec<(u32, PathBuf)>> {
    let mut out = Vec::new();
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() != want_dirs {
            continue;
        }
        if !want_dirs && path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        if let Ok(id) = stem.parse::<u32>() {
            out.push((id, path));
        }
    }
    out.sort_by_key(|(id, _)| *id);
    Ok(out)
}

/// Copies an external `src/<style_id>/<char_id>.png` tree into `dst`,
/// normalizing to `[0, 1]` and resizing bilinearly to `size`.
///
/// Only characters present in every style are kept.
pub fn ingest_corpus(
    src: &Path,
    dst: &Path,
    size: usize,
    canonical_style_id: StyleId,
    ratios: &SplitRatios,
    seed: u64,
) -> Result<DatasetManifest> {
    ensure!(
        super::SUPPORTED_SIZES.contains(&size),
        Config,
        "unsupported image size {size}"
    );
    let style_dirs = numeric_entries(src, true)?;
    ensure!(
        style_dirs.iter().any(|(s, _)| *s == canonical_style_id),
        Validation,
        "canonical style {canonical_style_id} not found under {}",
        src.display()
    );
    let mut per_style = Vec::new();
    let mut common: Option<BTreeSet<CharId>> = None;
    for (style, dir) in &style_dirs {
        let files = numeric_entries(dir, false)?;
        let ids: BTreeSet<CharId> = files.iter().map(|(c, _)| *c).collect();
        common = Some(match common {
            None => ids,
            Some(prev) => prev.intersection(&ids).copied().collect(),
        });
        per_style.push((*style, files));
    }
    let chars: Vec<CharId> = common.unwrap_or_default().into_iter().collect();
    ensure!(chars.len() >= 4, Validation, "only {} shared characters", chars.len());
    let styles: Vec<StyleId> = per_style.iter().map(|(s, _)| *s).collect();
    let targets: Vec<StyleId> = styles
        .iter()
        .copied()
        .filter(|s| *s != canonical_style_id)
        .collect();
    let splits = make_splits(&chars, &targets, ratios, seed)?;

    let jobs: Vec<(StyleId, CharId, PathBuf)> = per_style
        .iter()
        .flat_map(|(s, files)| {
            files
                .iter()
                .filter(|(c, _)| chars.binary_search(c).is_ok())
                .map(move |(c, p)| (*s, *c, p.clone()))
        })
        .collect();
    let images = par::try_map(Execution::current(), &jobs, |(s, c, path)| {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let gray = ::image::load_from_memory(&bytes)?.to_luma8();
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        let px: Vec<f32> = gray.pixels().map(|p| f32::from(p.0[0]) / 255.0).collect();
        let resized = super::image::resize_bilinear(&px, w, h, size)?;
        GlyphImage::new(size, resized, *c, *s)
    })?;

    let manifest = DatasetManifest {
        root: dst.to_path_buf(),
        image_size: size,
        seed,
        canonical_style_id,
        chars,
        styles,
        style_specs: Vec::new(),
        splits,
    };
    let corpus = Corpus::from_parts(manifest, images)?;
    std::fs::create_dir_all(dst).map_err(|e| Error::io(dst, e))?;
    write_images(dst, &corpus)?;
    corpus.manifest.save()?;
    Ok(corpus.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(seed: u64) -> DatasetParams {
        DatasetParams {
            num_chars: 20,
            num_styles: 5,
            size: 32,
            split_ratios: SplitRatios::default(),
            seed,
        }
    }

    #[test]
    fn splits_partition_chars_and_styles() {
        let corpus = render_corpus(&params(1)).unwrap();
        let s = &corpus.manifest.splits;
        assert_eq!(s.seen_chars.len() + s.unseen_chars.len(), 20);
        assert_eq!(s.seen_styles.len() + s.unseen_styles.len(), 4);
        corpus.manifest.validate().unwrap();
        assert!(!s.seen_styles.contains(&0) && !s.unseen_styles.contains(&0));
    }

    #[test]
    fn degenerate_splits_rejected() {
        let mut p = params(1);
        p.split_ratios.seen_styles = 1.0;
        p.split_ratios.unseen_styles = 0.0;
        assert!(matches!(render_corpus(&p), Err(Error::Validation(_))));
        let mut p = params(1);
        p.split_ratios.seen_chars = 0.7;
        assert!(matches!(render_corpus(&p), Err(Error::Validation(_))));
        let mut p = params(1);
        p.num_styles = 2;
        assert!(render_corpus(&p).is_err());
    }

    #[test]
    fn manifest_json_round_trips() {
        let corpus = render_corpus(&params(3)).unwrap();
        let json = corpus.manifest.to_json().unwrap();
        let back: DatasetManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, corpus.manifest);
    }

    #[test]
    fn unwritable_root_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("blocker");
        std::fs::write(&file, b"x").unwrap();
        let err = build_dataset(&file.join("sub"), &params(1)).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }
}
