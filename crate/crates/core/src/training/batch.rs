use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::data::WindowSample;
use crate::error::{Error, Result};

/// All windows of one basin.
#[derive(Clone, Debug, PartialEq)]
pub struct BasinWindows {
    pub basin_id: String,
    pub windows: Vec<WindowSample>,
}

/// Groups windows by basin, preserving first-appearance order of basins.
pub fn group_by_basin(windows: Vec<WindowSample>) -> Vec<BasinWindows> {
    let mut out: Vec<BasinWindows> = Vec::new();
    for w in windows {
        match out.iter_mut().find(|b| b.basin_id == w.basin_id) {
            Some(b) => b.windows.push(w),
            None => out.push(BasinWindows {
                basin_id: w.basin_id.clone(),
                windows: vec![w],
            }),
        }
    }
    out
}

/// `N` anchor windows and their positives; `anchors[i]` and `positives[i]`
/// come from the same basin, and every pair is from a different basin.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch<'a> {
    pub anchors: Vec<&'a WindowSample>,
    pub positives: Vec<&'a WindowSample>,
}

impl<'a> ContrastiveBatch<'a> {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Anchors followed by positives, `2N` windows.
    pub fn sequences(&self) -> Vec<&'a WindowSample> {
        self.anchors.iter().chain(&self.positives).copied().collect()
    }
}

/// Indices of basins that can form a positive pair. Others are logged.
pub fn eligible_basins(basins: &[BasinWindows]) -> Vec<usize> {
    let mut ok = Vec::with_capacity(basins.len());
    for (i, b) in basins.iter().enumerate() {
        if b.windows.len() >= 2 {
            ok.push(i);
        } else {
            log::warn!("basin {} has {} window(s); excluded from contrastive batches", b.basin_id, b.windows.len());
        }
    }
    ok
}

/// Draws two distinct windows from each chosen basin.
pub fn pair_windows<'a>(basins: &'a [BasinWindows], chosen: &[usize], rng: &mut impl Rng) -> Result<ContrastiveBatch<'a>> {
    let mut anchors = Vec::with_capacity(chosen.len());
    let mut positives = Vec::with_capacity(chosen.len());
    for &i in chosen {
        let b = basins
            .get(i)
            .ok_or_else(|| Error::arg(format!("basin index {i} out of range")))?;
        if b.windows.len() < 2 {
            return Err(Error::arg(format!("basin {} has fewer than 2 windows", b.basin_id)));
        }
        let pick = index::sample(rng, b.windows.len(), 2);
        anchors.push(&b.windows[pick.index(0)]);
        positives.push(&b.windows[pick.index(1)]);
    }
    Ok(ContrastiveBatch { anchors, positives })
}

/// One batch of `batch_size` distinct basins (fewer if not enough are
/// eligible), each contributing an (anchor, positive) pair.
pub fn make_contrastive_batch<'a>(
    basins: &'a [BasinWindows],
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<ContrastiveBatch<'a>> {
    if batch_size == 0 {
        return Err(Error::arg("batch size must be positive"));
    }
    let ok = eligible_basins(basins);
    if ok.is_empty() {
        return Err(Error::arg("no basin has at least 2 windows"));
    }
    let n = batch_size.min(ok.len());
    let chosen: Vec<usize> = index::sample(rng, ok.len(), n).iter().map(|k| ok[k]).collect();
    pair_windows(basins, &chosen, rng)
}

/// Batches covering every window once: each eligible basin's windows are
/// shuffled and paired off (an odd one out is skipped), then the `r`-th pairs
/// of all basins form round `r`, which is shuffled and cut into batches of at
/// most `batch_size` distinct basins.
pub fn epoch_batches<'a>(
    basins: &'a [BasinWindows],
    eligible: &[usize],
    batch_size: usize,
    rng: &mut impl Rng,
) -> Vec<ContrastiveBatch<'a>> {
    let mut pairs: Vec<Vec<(usize, usize, usize)>> = Vec::new();
    for &b in eligible {
        let mut idx: Vec<usize> = (0..basins[b].windows.len()).collect();
        idx.shuffle(rng);
        for (r, p) in idx.chunks_exact(2).enumerate() {
            if pairs.len() <= r {
                pairs.push(Vec::new());
            }
            pairs[r].push((b, p[0], p[1]));
        }
    }
    let mut out = Vec::new();
    for mut round in pairs {
        round.shuffle(rng);
        for chunk in round.chunks(batch_size.max(1)) {
            out.push(ContrastiveBatch {
                anchors: chunk.iter().map(|&(b, a, _)| &basins[b].windows[a]).collect(),
                positives: chunk.iter().map(|&(b, _, p)| &basins[b].windows[p]).collect(),
            });
        }
    }
    out
}
