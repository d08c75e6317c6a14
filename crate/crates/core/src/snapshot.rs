//! Offline preprocessing: synthesize snapshot images from profiles, dedup
//! their content into shared pools, and build attachable memory templates.
//!
//! Images are described, never materialized. Each page carries a stable
//! synthetic content id; pages are grouped into fixed 32-page regions that
//! act as the dedup unit and the VMA granularity. Content ids depend only
//! on (sharing class, index), so snapshots built independently for two
//! functions of the same language deduplicate their common base without
//! any coordination.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mempool::{PoolError, PoolKind, PoolSet, PAGE_SIZE};
use crate::mmtemplate::{MappingKind, MmTemplate, Prot, TemplateError, VmaDescriptor};
use crate::simcore::{fnv1a, RngHub};

/// Dedup unit and VMA granularity, pages. 32 pages = 128 KiB.
pub const REGION_PAGES: u64 = 32;

/// Image VMAs start here; templates get a zero-fill working area above.
const IMAGE_VA_BASE: u64 = 0x5600_0000_0000;
const WORKING_VA_BASE: u64 = 0x7F00_0000_0000;

/// Pages in the zero-fill working VMA appended to every template (heap and
/// stack growth lands there as local memory, never in pool blocks).
pub const WORKING_VMA_PAGES: u64 = 1024;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("image for {function_id} is empty")]
    EmptyImage { function_id: String },
    #[error("sharing fractions must satisfy 0 <= cross <= same <= 1, got same={same} cross={cross}")]
    BadSharing { same: f64, cross: f64 },
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Fractions of an image shared with common bases. `same_language` is the
/// total shared with another function of the same language and includes
/// the `cross_language` part shared with every function.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SharingSpec {
    pub same_language: f64,
    pub cross_language: f64,
}

impl Default for SharingSpec {
    fn default() -> Self {
        SharingSpec { same_language: 0.40, cross_language: 0.10 }
    }
}

impl SharingSpec {
    pub const NONE: SharingSpec = SharingSpec { same_language: 0.0, cross_language: 0.0 };

    fn validate(&self) -> Result<(), SnapshotError> {
        let ok = (0.0..=1.0).contains(&self.cross_language)
            && self.cross_language <= self.same_language
            && self.same_language <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(SnapshotError::BadSharing {
                same: self.same_language,
                cross: self.cross_language,
            })
        }
    }
}

/// Which base a region's content belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentClass {
    /// Shared by every function regardless of language.
    GlobalBase,
    /// Shared by functions of one language runtime.
    LanguageBase,
    /// Private to this function.
    Unique,
}

#[derive(Debug, Clone, Serialize)]
pub struct SnapshotRegion {
    pub vma: VmaDescriptor,
    pub pages: u64,
    pub class: ContentClass,
    /// Index within the class; two images of one language line their
    /// language-base regions up from zero so overlaps dedup.
    pub class_index: u64,
    pub content_hash_hex: String,
    #[serde(skip)]
    pub content_hash: u128,
}

#[derive(Debug, Clone, Serialize)]
pub struct SnapshotImage {
    pub function_id: String,
    pub language: String,
    pub total_bytes: u64,
    pub regions: Vec<SnapshotRegion>,
}

fn class_namespace(class: ContentClass, language: &str, function_id: &str) -> String {
    match class {
        ContentClass::GlobalBase => "base/shared".to_string(),
        ContentClass::LanguageBase => format!("base/{language}"),
        ContentClass::Unique => format!("fn/{function_id}"),
    }
}

impl SnapshotImage {
    /// Pages of one region's synthetic content, for oracle tests. Derived,
    /// not stored; identical inputs give identical sequences.
    pub fn page_id_sequence(&self, region: &SnapshotRegion) -> Vec<u128> {
        let ns = class_namespace(region.class, &self.language, &self.function_id);
        let ns = format!("{ns}/pg");
        (0..region.pages)
            .map(|k| RngHub::content_hash(&ns, region.class_index * REGION_PAGES + k))
            .collect()
    }

    pub fn total_pages(&self) -> u64 {
        self.regions.iter().map(|r| r.pages).sum()
    }

    /// JSON manifest for golden tests.
    pub fn manifest_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("snapshot manifest")
    }
}

/// `build_snapshot`: describe a function's memory image. The leading
/// `cross_language` fraction of regions carries globally shared content,
/// the next `same_language - cross_language` fraction carries the language
/// base, the rest is unique to the function. Fractions quantize to whole
/// regions. Content ids are stable hashes, so no rng is involved and
/// images built in any order dedup identically.
pub fn build_snapshot(
    function_id: &str,
    language: &str,
    image_bytes: u64,
    sharing: &SharingSpec,
) -> Result<SnapshotImage, SnapshotError> {
    sharing.validate()?;
    if image_bytes == 0 {
        return Err(SnapshotError::EmptyImage { function_id: function_id.to_string() });
    }
    let pages = image_bytes.div_ceil(PAGE_SIZE);
    let regions = pages.div_ceil(REGION_PAGES);
    let global_regions = (regions as f64 * sharing.cross_language).round() as u64;
    let shared_regions = (regions as f64 * sharing.same_language).round() as u64;

    let mut out = Vec::with_capacity(regions as usize);
    let mut emitted = 0u64;
    for r in 0..regions {
        let region_pages = (pages - emitted).min(REGION_PAGES);
        let (class, class_index) = if r < global_regions {
            (ContentClass::GlobalBase, r)
        } else if r < shared_regions {
            (ContentClass::LanguageBase, r - global_regions)
        } else {
            (ContentClass::Unique, r - shared_regions)
        };
        let ns = class_namespace(class, language, function_id);
        let hash =
            RngHub::content_hash(&format!("{ns}#{region_pages}"), class_index);
        out.push(SnapshotRegion {
            vma: VmaDescriptor {
                va_start: IMAGE_VA_BASE + r * REGION_PAGES * PAGE_SIZE,
                length: region_pages * PAGE_SIZE,
                prot: Prot::rw(),
                kind: MappingKind::Anonymous,
                private: true,
                zero_fill: false,
            },
            pages: region_pages,
            class,
            class_index,
            content_hash_hex: format!("{hash:032x}"),
            content_hash: hash,
        });
        emitted += region_pages;
    }
    Ok(SnapshotImage {
        function_id: function_id.to_string(),
        language: language.to_string(),
        total_bytes: pages * PAGE_SIZE,
        regions: out,
    })
}

/// Where template pages land.
#[derive(Debug, Clone, Copy, Serialize)]
pub enum PoolAssignment {
    /// Whole image in one pool (the default scenario arms).
    Whole(PoolKind),
    /// Leading fraction of regions (the hot set) in `hot`, rest in `cold`.
    Split { hot: PoolKind, cold: PoolKind, hot_fraction: f64 },
}

impl PoolAssignment {
    fn pool_for(&self, region_index: u64, total_regions: u64) -> PoolKind {
        match *self {
            PoolAssignment::Whole(kind) => kind,
            PoolAssignment::Split { hot, cold, hot_fraction } => {
                let hot_regions = (total_regions as f64 * hot_fraction).round() as u64;
                if region_index < hot_regions {
                    hot
                } else {
                    cold
                }
            }
        }
    }
}

/// `build_template`: dedup-insert every region and wire a template to the
/// resulting blocks. Appends one zero-fill working VMA so post-attach heap
/// growth allocates local pages instead of touching pool blocks.
pub fn build_template(
    img: &SnapshotImage,
    assignment: PoolAssignment,
    pools: &mut PoolSet,
) -> Result<MmTemplate, SnapshotError> {
    let mut tpl = MmTemplate::new(fnv1a(img.function_id.as_bytes()));
    let total = img.regions.len() as u64;
    for (i, region) in img.regions.iter().enumerate() {
        let kind = assignment.pool_for(i as u64, total);
        let block = pools.get_mut(kind).dedup_insert(region.content_hash, region.pages)?;
        tpl.add_map(region.vma)?;
        tpl.setup_pt(region.vma.va_start, region.vma.length, block.offset, pools.get(kind))?;
    }
    tpl.add_map(VmaDescriptor {
        va_start: WORKING_VA_BASE,
        length: WORKING_VMA_PAGES * PAGE_SIZE,
        prot: Prot::rw(),
        kind: MappingKind::Anonymous,
        private: true,
        zero_fill: true,
    })?;
    Ok(tpl)
}
