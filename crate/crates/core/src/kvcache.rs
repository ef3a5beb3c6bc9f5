//! Pre-RoPE key/value store with sink + sliding-window retention.
//!
//! Keys are stored exactly as projected, before any rotation. Every time a
//! window is assembled the stored keys are rotated at window-local positions:
//! sink chunks keep their absolute slot, the remaining retained chunks are
//! packed directly after them. Reference tokens are retained for the whole
//! session and rotated at their reference offsets.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LpmError, Result};
use crate::latcore::{BoolMask, Tensor2D, TokenKind};
use crate::maskgen::windowed_context_mask;
use crate::ropekit::{apply_rope, Position3, RopeParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvVariant {
    /// Exported by backbone passes over noisy latents.
    Noisy,
    /// Exported by refiner passes.
    Clean,
}

/// Pre-rotation K/V for one (chunk, layer, variant). Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct KvEntry {
    chunk_index: usize,
    layer: usize,
    variant: KvVariant,
    kind: TokenKind,
    k_pre: Tensor2D,
    v_pre: Tensor2D,
}

impl KvEntry {
    pub fn new(
        chunk_index: usize,
        layer: usize,
        variant: KvVariant,
        kind: TokenKind,
        k_pre: Tensor2D,
        v_pre: Tensor2D,
    ) -> Self {
        Self {
            chunk_index,
            layer,
            variant,
            kind,
            k_pre,
            v_pre,
        }
    }

    pub fn chunk_index(&self) -> usize {
        self.chunk_index
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn variant(&self) -> KvVariant {
        self.variant
    }

    pub fn kind(&self) -> TokenKind {
        self.kind
    }

    pub fn k_pre(&self) -> &Tensor2D {
        &self.k_pre
    }

    pub fn v_pre(&self) -> &Tensor2D {
        &self.v_pre
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionPolicy {
    pub sink_chunks: usize,
    /// Sliding window length, counting the current chunk.
    pub recent_chunks: usize,
}

impl Default for RetentionPolicy {
    fn default() -> Self {
        Self {
            sink_chunks: 3,
            recent_chunks: 2,
        }
    }
}

impl RetentionPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.recent_chunks == 0 {
            return Err(LpmError::Config("recent_chunks must be >= 1".into()));
        }
        Ok(())
    }

    /// Maximum number of chunks a window can hold.
    pub fn capacity(&self) -> usize {
        self.sink_chunks + self.recent_chunks
    }
}

/// Chunks kept in the attention window when generating chunk `current`.
pub fn retained_set(current: usize, policy: &RetentionPolicy) -> Vec<usize> {
    let sinks = 0..policy.sink_chunks.min(current + 1);
    let recent_start = (current + 1).saturating_sub(policy.recent_chunks);
    let mut set: BTreeSet<usize> = sinks.collect();
    set.extend(recent_start..=current);
    set.into_iter().collect()
}

/// Window slot of `current` inside its own retained set.
pub fn current_slot(current: usize, policy: &RetentionPolicy) -> usize {
    retained_set(current, policy).len() - 1
}

/// Temporal positions of a chunk placed at window slot `slot`.
pub fn chunk_positions(slot: usize, tokens_per_chunk: usize) -> Vec<Position3> {
    (0..tokens_per_chunk)
        .map(|i| Position3::temporal((slot * tokens_per_chunk + i) as u64))
        .collect()
}

/// Rotated keys and plain values for one layer of an assembled window.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWindow {
    pub video_k: Tensor2D,
    pub video_v: Tensor2D,
    pub ref_k: Tensor2D,
    pub ref_v: Tensor2D,
}

/// Attention context for one step: video chunks in ascending order followed
/// by the reference tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowKv {
    pub chunk_ids: Vec<usize>,
    pub tokens_per_chunk: usize,
    pub video_positions: Vec<Position3>,
    pub ref_positions: Vec<Position3>,
    pub layers: Vec<LayerWindow>,
}

impl WindowKv {
    /// A window with no video history, only reference K/V.
    pub fn references_only(
        tokens_per_chunk: usize,
        d_model: usize,
        ref_layers: &[(Tensor2D, Tensor2D)],
        ref_positions: &[Position3],
        rope: &RopeParams,
    ) -> Result<Self> {
        let layers = ref_layers
            .iter()
            .map(|(k, v)| {
                Ok(LayerWindow {
                    video_k: Tensor2D::zeros(0, d_model),
                    video_v: Tensor2D::zeros(0, d_model),
                    ref_k: apply_rope(k, ref_positions, rope)?,
                    ref_v: v.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            chunk_ids: Vec::new(),
            tokens_per_chunk,
            video_positions: Vec::new(),
            ref_positions: ref_positions.to_vec(),
            layers,
        })
    }

    pub fn n_ref_tokens(&self) -> usize {
        self.ref_positions.len()
    }

    pub fn n_video_tokens(&self) -> usize {
        self.chunk_ids.len() * self.tokens_per_chunk
    }

    /// Every key position, video rows then references.
    pub fn positions(&self) -> Vec<Position3> {
        let mut p = self.video_positions.clone();
        p.extend_from_slice(&self.ref_positions);
        p
    }

    pub fn mask(&self) -> Result<BoolMask> {
        windowed_context_mask(&self.chunk_ids, self.tokens_per_chunk, self.n_ref_tokens())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct RefStore {
    layers: Vec<(Tensor2D, Tensor2D)>,
    positions: Vec<Position3>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    tokens_per_chunk: usize,
    n_layers: usize,
    d_model: usize,
    entries: BTreeMap<(KvVariant, usize, usize), KvEntry>,
    refs: BTreeMap<KvVariant, RefStore>,
}

impl KvCache {
    pub fn new(tokens_per_chunk: usize, n_layers: usize, d_model: usize) -> Self {
        Self {
            tokens_per_chunk,
            n_layers,
            d_model,
            entries: BTreeMap::new(),
            refs: BTreeMap::new(),
        }
    }

    pub fn tokens_per_chunk(&self) -> usize {
        self.tokens_per_chunk
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    /// Installs the per-layer reference K/V for a variant. References are never evicted.
    pub fn set_references(
        &mut self,
        variant: KvVariant,
        layers: Vec<(Tensor2D, Tensor2D)>,
        positions: Vec<Position3>,
    ) -> Result<()> {
        if layers.len() != self.n_layers {
            return Err(LpmError::Shape(format!(
                "{} reference layers for a {}-layer cache",
                layers.len(),
                self.n_layers
            )));
        }
        for (k, v) in &layers {
            if k.rows() != positions.len() || v.rows() != positions.len() {
                return Err(LpmError::Shape("reference rows vs positions".into()));
            }
        }
        self.refs.insert(variant, RefStore { layers, positions });
        Ok(())
    }

    pub fn has_references(&self, variant: KvVariant) -> bool {
        self.refs.contains_key(&variant)
    }

    pub fn reference_layers(&self, variant: KvVariant) -> Option<&[(Tensor2D, Tensor2D)]> {
        self.refs.get(&variant).map(|r| r.layers.as_slice())
    }

    pub fn insert(&mut self, entry: KvEntry) -> Result<()> {
        if entry.layer >= self.n_layers {
            return Err(LpmError::Contract(format!(
                "layer {} out of range for {} layers",
                entry.layer, self.n_layers
            )));
        }
        if entry.k_pre.rows() != self.tokens_per_chunk || entry.v_pre.rows() != self.tokens_per_chunk {
            return Err(LpmError::Shape(format!(
                "entry holds {} rows, chunks have {} tokens",
                entry.k_pre.rows(),
                self.tokens_per_chunk
            )));
        }
        let key = (entry.variant, entry.chunk_index, entry.layer);
        if self.entries.contains_key(&key) {
            return Err(LpmError::DuplicateEntry {
                chunk: entry.chunk_index,
                layer: entry.layer,
                variant: entry.variant,
            });
        }
        self.entries.insert(key, entry);
        Ok(())
    }

    /// Drops every chunk entry outside `retained_set(current)`; all variants.
    pub fn evict_for(&mut self, current: usize, policy: &RetentionPolicy) {
        let keep: BTreeSet<usize> = retained_set(current, policy).into_iter().collect();
        self.entries.retain(|(_, chunk, _), _| keep.contains(chunk));
    }

    pub fn get(&self, variant: KvVariant, chunk: usize, layer: usize) -> Result<&KvEntry> {
        self.entries
            .get(&(variant, chunk, layer))
            .ok_or(LpmError::CacheMiss {
                chunk,
                layer,
                variant,
            })
    }

    pub fn stored_chunks(&self, variant: KvVariant) -> BTreeSet<usize> {
        self.entries
            .keys()
            .filter(|(v, _, _)| *v == variant)
            .map(|(_, c, _)| *c)
            .collect()
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    /// Stored key rows over all chunk entries plus reference rows (per layer, per variant).
    pub fn stored_token_rows(&self) -> usize {
        let chunk_rows: usize = self.entries.values().map(|e| e.k_pre.rows()).sum();
        let ref_rows: usize = self
            .refs
            .values()
            .map(|r| r.layers.iter().map(|(k, _)| k.rows()).sum::<usize>())
            .sum();
        chunk_rows + ref_rows
    }

    pub fn stored_bytes(&self) -> usize {
        let chunk: usize = self
            .entries
            .values()
            .map(|e| (e.k_pre.data().len() + e.v_pre.data().len()) * 4)
            .sum();
        let refs: usize = self
            .refs
            .values()
            .flat_map(|r| r.layers.iter())
            .map(|(k, v)| (k.data().len() + v.data().len()) * 4)
            .sum();
        chunk + refs
    }

    fn assemble(
        &self,
        variant: KvVariant,
        chunk_ids: Vec<usize>,
        rope: &RopeParams,
    ) -> Result<WindowKv> {
        let refs = self.refs.get(&variant).ok_or_else(|| {
            LpmError::Contract(format!("no reference K/V installed for {variant:?}"))
        })?;
        let tpc = self.tokens_per_chunk;
        let video_positions: Vec<Position3> = (0..chunk_ids.len())
            .flat_map(|slot| chunk_positions(slot, tpc))
            .collect();
        let mut layers = Vec::with_capacity(self.n_layers);
        for layer in 0..self.n_layers {
            let mut ks = Vec::with_capacity(chunk_ids.len());
            let mut vs = Vec::with_capacity(chunk_ids.len());
            for &c in &chunk_ids {
                let e = self.get(variant, c, layer)?;
                ks.push(e.k_pre());
                vs.push(e.v_pre());
            }
            let mut video_k = Tensor2D::vstack(&ks)?;
            let mut video_v = Tensor2D::vstack(&vs)?;
            if chunk_ids.is_empty() {
                video_k = Tensor2D::zeros(0, self.d_model);
                video_v = Tensor2D::zeros(0, self.d_model);
            }
            let (ref_k_pre, ref_v) = &refs.layers[layer];
            layers.push(LayerWindow {
                video_k: apply_rope(&video_k, &video_positions, rope)?,
                video_v,
                ref_k: apply_rope(ref_k_pre, &refs.positions, rope)?,
                ref_v: ref_v.clone(),
            });
        }
        Ok(WindowKv {
            chunk_ids,
            tokens_per_chunk: tpc,
            video_positions,
            ref_positions: refs.positions.clone(),
            layers,
        })
    }

    /// History context for generating `current`: retained chunks other than
    /// `current` itself, plus references. The current chunk's slot is
    /// `chunk_ids.len()` of the result.
    pub fn assemble_history(
        &self,
        variant: KvVariant,
        current: usize,
        policy: &RetentionPolicy,
        rope: &RopeParams,
    ) -> Result<WindowKv> {
        let ids: Vec<usize> = retained_set(current, policy)
            .into_iter()
            .filter(|&c| c != current)
            .collect();
        self.assemble(variant, ids, rope)
    }

    /// Full retained window including `current`, whose entries must already be stored.
    pub fn assemble_window(
        &self,
        variant: KvVariant,
        current: usize,
        policy: &RetentionPolicy,
        rope: &RopeParams,
    ) -> Result<WindowKv> {
        self.assemble(variant, retained_set(current, policy), rope)
    }

    /// Writes `index.json` and `kv.bin` (little-endian f32) into `dir`.
    pub fn write_snapshot(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut blob: Vec<u8> = Vec::new();
        let mut offset = 0usize;
        let mut push = |t: &Tensor2D, blob: &mut Vec<u8>| {
            let rec = BlobRef {
                offset,
                rows: t.rows(),
                cols: t.cols(),
            };
            blob.extend_from_slice(&t.to_le_bytes());
            offset += t.data().len();
            rec
        };
        let mut entries = Vec::new();
        for e in self.entries.values() {
            entries.push(SnapshotEntry {
                chunk: e.chunk_index,
                layer: e.layer,
                variant: e.variant,
                kind: e.kind,
                k: push(&e.k_pre, &mut blob),
                v: push(&e.v_pre, &mut blob),
            });
        }
        let mut refs = Vec::new();
        for (variant, store) in &self.refs {
            for (layer, (k, v)) in store.layers.iter().enumerate() {
                refs.push(SnapshotRef {
                    variant: *variant,
                    layer,
                    positions: store.positions.clone(),
                    k: push(k, &mut blob),
                    v: push(v, &mut blob),
                });
            }
        }
        let index = SnapshotIndex {
            tokens_per_chunk: self.tokens_per_chunk,
            n_layers: self.n_layers,
            d_model: self.d_model,
            entries,
            refs,
        };
        std::fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
        std::fs::write(dir.join("kv.bin"), blob)?;
        Ok(())
    }

    pub fn read_snapshot(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index: SnapshotIndex = serde_json::from_slice(&std::fs::read(dir.join("index.json"))?)?;
        let bytes = std::fs::read(dir.join("kv.bin"))?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let take = |r: &BlobRef| -> Result<Tensor2D> {
            let n = r.rows * r.cols;
            let s = values
                .get(r.offset..r.offset + n)
                .ok_or_else(|| LpmError::Checkpoint("snapshot blob truncated".into()))?;
            Tensor2D::from_vec(r.rows, r.cols, s.to_vec())
        };
        let mut cache = KvCache::new(index.tokens_per_chunk, index.n_layers, index.d_model);
        for e in &index.entries {
            cache.insert(KvEntry::new(e.chunk, e.layer, e.variant, e.kind, take(&e.k)?, take(&e.v)?))?;
        }
        let mut refs: BTreeMap<KvVariant, Vec<&SnapshotRef>> = BTreeMap::new();
        for r in &index.refs {
            refs.entry(r.variant).or_default().push(r);
        }
        for (variant, mut list) in refs {
            list.sort_by_key(|r| r.layer);
            let positions = list.first().map(|r| r.positions.clone()).unwrap_or_default();
            let layers = list
                .iter()
                .map(|r| Ok((take(&r.k)?, take(&r.v)?)))
                .collect::<Result<Vec<_>>>()?;
            cache.set_references(variant, layers, positions)?;
        }
        Ok(cache)
    }
}

#[derive(Serialize, Deserialize)]
struct BlobRef {
    offset: usize,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct SnapshotEntry {
    chunk: usize,
    layer: usize,
    variant: KvVariant,
    kind: TokenKind,
    k: BlobRef,
    v: BlobRef,
}

#[derive(Serialize, Deserialize)]
struct SnapshotRef {
    variant: KvVariant,
    layer: usize,
    positions: Vec<Position3>,
    k: BlobRef,
    v: BlobRef,
}

#[derive(Serialize, Deserialize)]
struct SnapshotIndex {
    tokens_per_chunk: usize,
    n_layers: usize,
    d_model: usize,
    entries: Vec<SnapshotEntry>,
    refs: Vec<SnapshotRef>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(chunk: usize, layer: usize, variant: KvVariant, tpc: usize, d: usize) -> KvEntry {
        let fill = (chunk * 10 + layer) as f32;
        KvEntry::new(
            chunk,
            layer,
            variant,
            if chunk < 3 { TokenKind::Sink } else { TokenKind::Video },
            Tensor2D::filled(tpc, d, fill),
            Tensor2D::filled(tpc, d, -fill),
        )
    }

    fn cache_with_refs(tpc: usize, layers: usize, d: usize) -> KvCache {
        let mut c = KvCache::new(tpc, layers, d);
        for v in [KvVariant::Noisy, KvVariant::Clean] {
            let refs = (0..layers)
                .map(|_| (Tensor2D::filled(2, d, 0.5), Tensor2D::filled(2, d, 0.25)))
                .collect();
            c.set_references(v, refs, vec![Position3::temporal(10_040); 2]).unwrap();
        }
        c
    }

    #[test]
    fn retained_set_examples() {
        let p = RetentionPolicy::default();
        assert_eq!(retained_set(9, &p), vec![0, 1, 2, 8, 9]);
        assert_eq!(retained_set(2, &p), vec![0, 1, 2]);
        assert_eq!(retained_set(0, &p), vec![0]);
        assert_eq!(retained_set(3, &p), vec![0, 1, 2, 3]);
        for current in 4..=100 {
            assert_eq!(retained_set(current, &p).len(), 5, "current {current}");
        }
    }

    #[test]
    fn retained_set_other_policies() {
        let p = RetentionPolicy { sink_chunks: 0, recent_chunks: 1 };
        assert_eq!(retained_set(7, &p), vec![7]);
        let p = RetentionPolicy { sink_chunks: 1, recent_chunks: 3 };
        assert_eq!(retained_set(7, &p), vec![0, 5, 6, 7]);
        assert!(RetentionPolicy { sink_chunks: 2, recent_chunks: 0 }.validate().is_err());
    }

    #[test]
    fn insert_evict_replay() {
        let p = RetentionPolicy::default();
        let mut c = cache_with_refs(2, 2, 4);
        let mut counts = Vec::new();
        for chunk in 0..10 {
            for layer in 0..2 {
                c.insert(entry(chunk, layer, KvVariant::Noisy, 2, 4)).unwrap();
                c.insert(entry(chunk, layer, KvVariant::Clean, 2, 4)).unwrap();
            }
            c.evict_for(chunk, &p);
            assert_eq!(
                c.stored_chunks(KvVariant::Noisy).into_iter().collect::<Vec<_>>(),
                retained_set(chunk, &p)
            );
            assert!(c.has_references(KvVariant::Noisy) && c.has_references(KvVariant::Clean));
            counts.push(c.entry_count());
            let bound = p.capacity() * 2 * 2 * 2 + 2 * 2 * 2;
            assert!(c.stored_token_rows() <= bound);
        }
        assert_eq!(
            c.stored_chunks(KvVariant::Clean).into_iter().collect::<Vec<_>>(),
            vec![0, 1, 2, 8, 9]
        );
        assert!(counts[5..].iter().all(|&n| n == counts[5]));
    }

    #[test]
    fn duplicate_insert_rejected() {
        let mut c = cache_with_refs(2, 1, 4);
        c.insert(entry(0, 0, KvVariant::Noisy, 2, 4)).unwrap();
        assert!(matches!(
            c.insert(entry(0, 0, KvVariant::Noisy, 2, 4)),
            Err(LpmError::DuplicateEntry { .. })
        ));
        // other variant is a separate slot
        c.insert(entry(0, 0, KvVariant::Clean, 2, 4)).unwrap();
    }

    #[test]
    fn missing_entry_is_cache_miss() {
        let p = RetentionPolicy::default();
        let c = cache_with_refs(2, 1, 4);
        let err = c.assemble_history(KvVariant::Noisy, 1, &p, &RopeParams::temporal(4).unwrap());
        assert!(matches!(err, Err(LpmError::CacheMiss { chunk: 0, .. })));
    }

    #[test]
    fn session_start_window_holds_only_refs() {
        let p = RetentionPolicy::default();
        let c = cache_with_refs(2, 1, 4);
        let w = c
            .assemble_history(KvVariant::Noisy, 0, &p, &RopeParams::temporal(4).unwrap())
            .unwrap();
        assert!(w.chunk_ids.is_empty());
        assert_eq!(w.layers[0].video_k.rows(), 0);
        assert_eq!(w.layers[0].ref_k.rows(), 2);
    }

    #[test]
    fn window_positions_pack_after_sinks() {
        let p = RetentionPolicy::default();
        let rope = RopeParams::temporal(4).unwrap();
        let mut c = cache_with_refs(2, 1, 4);
        for chunk in 0..=9 {
            c.insert(entry(chunk, 0, KvVariant::Noisy, 2, 4)).unwrap();
            c.evict_for(chunk, &p);
        }
        let w = c.assemble_window(KvVariant::Noisy, 9, &p, &rope).unwrap();
        assert_eq!(w.chunk_ids, vec![0, 1, 2, 8, 9]);
        let ts: Vec<u64> = w.video_positions.iter().map(|p| p.t).collect();
        assert_eq!(ts, (0..10).collect::<Vec<_>>());
        // stored keys stay un-rotated
        assert_eq!(c.get(KvVariant::Noisy, 8, 0).unwrap().k_pre(), &Tensor2D::filled(2, 4, 80.0));
        let mask = w.mask().unwrap();
        assert_eq!(mask.shape(), (12, 12));
    }

    #[test]
    fn variants_never_mix() {
        let p = RetentionPolicy::default();
        let rope = RopeParams::temporal(4).unwrap();
        let mut c = cache_with_refs(2, 1, 4);
        c.insert(entry(0, 0, KvVariant::Noisy, 2, 4)).unwrap();
        assert!(c.assemble_history(KvVariant::Clean, 1, &p, &rope).is_err());
        assert!(c.assemble_history(KvVariant::Noisy, 1, &p, &rope).is_ok());
    }

    #[test]
    fn snapshot_round_trip() {
        let p = RetentionPolicy::default();
        let mut c = cache_with_refs(2, 2, 4);
        for chunk in 0..6 {
            for layer in 0..2 {
                c.insert(entry(chunk, layer, KvVariant::Noisy, 2, 4)).unwrap();
            }
            c.evict_for(chunk, &p);
        }
        let dir = tempfile::tempdir().unwrap();
        c.write_snapshot(dir.path()).unwrap();
        let back = KvCache::read_snapshot(dir.path()).unwrap();
        assert_eq!(back, c);
    }
}
