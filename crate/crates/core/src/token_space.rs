//! Token sets, their pixel regions, and transforms between irregular tokens
//! and dense feature maps.
//!
//! Every token region is a union of cells of the base grid (the stem output
//! resolution), stored as a dense cell -> token index grid. Regions of one
//! token set always partition the base grid. A feature-map pixel at a coarser
//! resolution covers an integer block of base cells, so the overlap between a
//! token region and a pixel is an integer cell count.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::autograd::{Mat, SparseRows, Tape, Var};
use crate::error::{invalid, Error, Result};

/// Dense base-grid map from cell to token index.
#[derive(Debug)]
pub struct RegionMap {
    height: usize,
    width: usize,
    cells: Vec<usize>,
    num_tokens: usize,
    areas: Vec<usize>,
    transforms: Mutex<HashMap<(usize, usize, bool), Arc<SparseRows>>>,
}

impl Clone for RegionMap {
    fn clone(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            cells: self.cells.clone(),
            num_tokens: self.num_tokens,
            areas: self.areas.clone(),
            transforms: Mutex::new(HashMap::new()),
        }
    }
}

impl PartialEq for RegionMap {
    fn eq(&self, other: &Self) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.num_tokens == other.num_tokens
            && self.cells == other.cells
    }
}

impl RegionMap {
    /// Validates that `cells` covers every token in `0..num_tokens`.
    pub fn new(height: usize, width: usize, cells: Vec<usize>, num_tokens: usize) -> Result<Self> {
        if cells.len() != height * width {
            return invalid(format!("region map has {} cells, expected {}x{}", cells.len(), height, width));
        }
        let mut areas = vec![0usize; num_tokens];
        for &t in &cells {
            if t >= num_tokens {
                return invalid(format!("region map references token {t} of {num_tokens}"));
            }
            areas[t] += 1;
        }
        if let Some(t) = areas.iter().position(|&a| a == 0) {
            return invalid(format!("token {t} has an empty region"));
        }
        Ok(Self { height, width, cells, num_tokens, areas, transforms: Mutex::new(HashMap::new()) })
    }

    /// One token per base cell, in row-major order.
    pub fn identity(height: usize, width: usize) -> Self {
        Self::new(height, width, (0..height * width).collect(), height * width).expect("identity partition")
    }

    /// Fixed square `block x block` regions, numbered row-major.
    pub fn grid(height: usize, width: usize, block: usize) -> Result<Self> {
        if block == 0 || !height.is_multiple_of(block) || !width.is_multiple_of(block) {
            return invalid(format!("block {block} does not tile {height}x{width}"));
        }
        let gw = width / block;
        let cells = (0..height * width).map(|c| (c / width / block) * gw + (c % width) / block).collect();
        Self::new(height, width, cells, (height / block) * gw)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn base_resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    /// Number of base cells in each token region.
    pub fn areas(&self) -> &[usize] {
        &self.areas
    }

    /// Region map after merging token `i` into merged token `assignment[i]`.
    pub fn merge(&self, assignment: &[usize], merged: usize) -> Result<Self> {
        if assignment.len() != self.num_tokens {
            return invalid(format!("assignment has {} entries for {} tokens", assignment.len(), self.num_tokens));
        }
        let mut hit = vec![false; merged];
        for &a in assignment {
            if a >= merged {
                return invalid(format!("assignment target {a} out of range {merged}"));
            }
            hit[a] = true;
        }
        if let Some(m) = hit.iter().position(|h| !h) {
            return invalid(format!("assignment is not surjective: merged token {m} is empty"));
        }
        let cells = self.cells.iter().map(|&t| assignment[t]).collect();
        Self::new(self.height, self.width, cells, merged)
    }

    fn block(&self, res: (usize, usize)) -> Result<(usize, usize)> {
        let (h, w) = res;
        if h == 0 || w == 0 || !self.height.is_multiple_of(h) || !self.width.is_multiple_of(w) {
            return invalid(format!(
                "resolution {h}x{w} does not evenly divide base grid {}x{}",
                self.height, self.width
            ));
        }
        Ok((self.height / h, self.width / w))
    }

    /// Pixel of a `res` map containing base cell `c`.
    fn pixel_of(&self, c: usize, res: (usize, usize), block: (usize, usize)) -> usize {
        let (y, x) = (c / self.width, c % self.width);
        (y / block.0) * res.1 + x / block.1
    }

    /// `(res.0*res.1) x N` matrix averaging token features by overlap area.
    pub fn to_map_matrix(&self, res: (usize, usize)) -> Result<Arc<SparseRows>> {
        self.cached(res, true, |this| {
            let block = this.block(res)?;
            let area = (block.0 * block.1) as f64;
            let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); res.0 * res.1];
            for (c, &t) in this.cells.iter().enumerate() {
                let row = &mut rows[this.pixel_of(c, res, block)];
                match row.iter_mut().find(|(tok, _)| *tok == t) {
                    Some(entry) => entry.1 += 1.0,
                    None => row.push((t, 1.0)),
                }
            }
            for row in &mut rows {
                row.sort_by_key(|e| e.0);
                row.iter_mut().for_each(|e| e.1 /= area);
            }
            Ok(SparseRows::from_rows(this.num_tokens, rows))
        })
    }

    /// `N x (res.0*res.1)` matrix averaging map pixels over each token region.
    pub fn to_token_matrix(&self, res: (usize, usize)) -> Result<Arc<SparseRows>> {
        self.cached(res, false, |this| {
            let block = this.block(res)?;
            let mut pairs: Vec<(usize, usize)> =
                this.cells.iter().enumerate().map(|(c, &t)| (t, this.pixel_of(c, res, block))).collect();
            pairs.sort_unstable();
            let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); this.num_tokens];
            for (t, p) in pairs {
                let row = &mut rows[t];
                match row.last_mut() {
                    Some(last) if last.0 == p => last.1 += 1.0,
                    _ => row.push((p, 1.0)),
                }
            }
            for (t, row) in rows.iter_mut().enumerate() {
                let a = this.areas[t] as f64;
                row.iter_mut().for_each(|e| e.1 /= a);
            }
            Ok(SparseRows::from_rows(res.0 * res.1, rows))
        })
    }

    fn cached(
        &self,
        res: (usize, usize),
        to_map: bool,
        build: impl FnOnce(&Self) -> Result<SparseRows>,
    ) -> Result<Arc<SparseRows>> {
        let key = (res.0, res.1, to_map);
        if let Some(m) = self.transforms.lock().expect("transform cache").get(&key) {
            return Ok(m.clone());
        }
        let m = Arc::new(build(self)?);
        self.transforms.lock().expect("transform cache").insert(key, m.clone());
        Ok(m)
    }

    /// Whether every region is a single axis-aligned square of base cells.
    pub fn all_square(&self) -> bool {
        let mut bounds = vec![(usize::MAX, usize::MAX, 0usize, 0usize); self.num_tokens];
        for (c, &t) in self.cells.iter().enumerate() {
            let (y, x) = (c / self.width, c % self.width);
            let b = &mut bounds[t];
            *b = (b.0.min(y), b.1.min(x), b.2.max(y), b.3.max(x));
        }
        bounds.iter().zip(&self.areas).all(|(&(y0, x0, y1, x1), &a)| {
            let (h, w) = (y1 - y0 + 1, x1 - x0 + 1);
            h == w && h * w == a
        })
    }
}

/// Variable-cardinality token set.
#[derive(Debug, Clone)]
pub struct TokenSet {
    /// `N x C` features.
    pub features: Mat,
    pub regions: Arc<RegionMap>,
    /// 1-based stage index.
    pub stage: usize,
}

impl TokenSet {
    pub fn new(features: Mat, regions: Arc<RegionMap>, stage: usize) -> Result<Self> {
        if features.nrows() != regions.num_tokens() {
            return invalid(format!(
                "{} feature rows for {} token regions",
                features.nrows(),
                regions.num_tokens()
            ));
        }
        Ok(Self { features, regions, stage })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }
}

/// Token set whose features are a node on an autograd tape.
#[derive(Debug, Clone)]
pub struct TapeTokens {
    pub features: Var,
    pub regions: Arc<RegionMap>,
}

impl TapeTokens {
    pub fn len(&self) -> usize {
        self.regions.num_tokens()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.num_tokens() == 0
    }

    /// Rasterizes onto a `res` grid (overlap-weighted average).
    pub fn to_map(&self, tape: &mut Tape, res: (usize, usize)) -> Result<Var> {
        let m = self.regions.to_map_matrix(res)?;
        Ok(tape.sparse(self.features, m))
    }

    /// Region-averages a `res` map back onto these tokens.
    pub fn from_map(&self, tape: &mut Tape, map: Var, res: (usize, usize)) -> Result<Var> {
        let m = self.regions.to_token_matrix(res)?;
        Ok(tape.sparse(map, m))
    }

    pub fn snapshot(&self, tape: &Tape, stage: usize) -> TokenSet {
        TokenSet { features: tape.value(self.features).clone(), regions: self.regions.clone(), stage }
    }
}

/// Dense `H' x W' x C` grid stored row-major as `(H'*W') x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Mat,
    pub height: usize,
    pub width: usize,
}

impl FeatureMap {
    pub fn new(data: Mat, height: usize, width: usize) -> Result<Self> {
        if data.nrows() != height * width {
            return invalid(format!("{} rows for a {}x{} map", data.nrows(), height, width));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature map contains non-finite values".into()));
        }
        Ok(Self { data, height, width })
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[[y * self.width + x, c]]
    }
}

/// Original-token to merged-token assignment kept for token upsampling.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeRecord {
    pub assignment: Vec<usize>,
    /// Importance score of each original token.
    pub importance: Vec<f64>,
    pub num_merged: usize,
}

impl MergeRecord {
    pub fn new(assignment: Vec<usize>, importance: Vec<f64>, num_merged: usize) -> Result<Self> {
        if assignment.len() != importance.len() {
            return invalid("assignment and importance lengths differ");
        }
        let mut hit = vec![false; num_merged];
        for &a in &assignment {
            if a >= num_merged {
                return invalid(format!("assignment target {a} out of range {num_merged}"));
            }
            hit[a] = true;
        }
        if hit.iter().any(|h| !h) {
            return invalid("assignment is not surjective");
        }
        Ok(Self { assignment, importance, num_merged })
    }

    pub fn identity(n: usize) -> Self {
        Self { assignment: (0..n).collect(), importance: vec![0.0; n], num_merged: n }
    }
}

pub fn tokens_to_map(tokens: &TokenSet, res: (usize, usize)) -> Result<FeatureMap> {
    let m = tokens.regions.to_map_matrix(res)?;
    FeatureMap::new(m.apply(tokens.features.view()), res.0, res.1)
}

pub fn map_to_tokens(map: &FeatureMap, tokens: &TokenSet) -> Result<Mat> {
    let m = tokens.regions.to_token_matrix(map.resolution())?;
    Ok(m.apply(map.data.view()))
}

/// Every pixel of the stem map becomes one token.
pub fn init_tokens(stem_map: &FeatureMap) -> TokenSet {
    let regions = Arc::new(RegionMap::identity(stem_map.height, stem_map.width));
    TokenSet { features: stem_map.data.clone(), regions, stage: 1 }
}

pub fn merge_regions(tokens: &TokenSet, record: &MergeRecord) -> Result<RegionMap> {
    tokens.regions.merge(&record.assignment, record.num_merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn two_token_set() -> TokenSet {
        // 2x2 base grid: token 0 covers three cells, token 1 one cell
        let regions = Arc::new(RegionMap::new(2, 2, vec![0, 0, 0, 1], 2).unwrap());
        TokenSet::new(array![[4.0, 0.0], [8.0, 1.0]], regions, 2).unwrap()
    }

    #[test]
    fn base_resolution_map_copies_token_features() {
        let t = two_token_set();
        let m = tokens_to_map(&t, (2, 2)).unwrap();
        assert_eq!(m.data, array![[4.0, 0.0], [4.0, 0.0], [4.0, 0.0], [8.0, 1.0]]);
    }

    #[test]
    fn overlap_weighted_pixel() {
        let t = two_token_set();
        let m = tokens_to_map(&t, (1, 1)).unwrap();
        assert_eq!(m.data, array![[(3.0 * 4.0 + 8.0) / 4.0, 0.25]]);
    }

    #[test]
    fn non_dividing_resolution_is_rejected() {
        let t = two_token_set();
        assert!(tokens_to_map(&t, (3, 2)).is_err());
        let m = FeatureMap::new(Mat::zeros((9, 1)), 3, 3).unwrap();
        assert!(map_to_tokens(&m, &t).is_err());
    }

    #[test]
    fn map_to_tokens_averages_region() {
        // token 0 spans pixels holding 1 and 3
        let regions = Arc::new(RegionMap::new(1, 3, vec![0, 1, 0], 2).unwrap());
        let t = TokenSet::new(Mat::zeros((2, 1)), regions, 1).unwrap();
        let m = FeatureMap::new(array![[1.0], [7.0], [3.0]], 1, 3).unwrap();
        assert_eq!(map_to_tokens(&m, &t).unwrap(), array![[2.0], [7.0]]);
    }

    #[test]
    fn constant_values_survive_both_directions() {
        let regions = Arc::new(RegionMap::new(4, 4, (0..16).map(|c| (c * 5) % 6).collect(), 6).unwrap());
        let t = TokenSet::new(Mat::from_elem((6, 3), 2.5), regions, 2).unwrap();
        for res in [(4, 4), (2, 2), (1, 1), (2, 4)] {
            let m = tokens_to_map(&t, res).unwrap();
            assert!(m.data.iter().all(|&v| (v - 2.5).abs() < 1e-12));
            let back = map_to_tokens(&m, &t).unwrap();
            assert!(back.iter().all(|&v| (v - 2.5).abs() < 1e-12));
        }
    }

    #[test]
    fn init_tokens_layout() {
        let m = FeatureMap::new(array![[1.0], [2.0], [3.0], [4.0]], 2, 2).unwrap();
        let t = init_tokens(&m);
        assert_eq!(t.len(), 4);
        assert_eq!(t.regions.cells(), &[0, 1, 2, 3]);
        assert_eq!(tokens_to_map(&t, (2, 2)).unwrap(), m);
        let big = FeatureMap::new(Mat::zeros((56 * 56, 1)), 56, 56).unwrap();
        assert_eq!(init_tokens(&big).len(), 3136);
    }

    #[test]
    fn merging_regions() {
        let m = FeatureMap::new(Mat::zeros((4, 1)), 2, 2).unwrap();
        let t = init_tokens(&m);
        let same = merge_regions(&t, &MergeRecord::identity(4)).unwrap();
        assert_eq!(same.cells(), t.regions.cells());
        let rec = MergeRecord::new(vec![0, 0, 1, 1], vec![0.0; 4], 2).unwrap();
        let merged = merge_regions(&t, &rec).unwrap();
        assert_eq!(merged.cells(), &[0, 0, 1, 1]);
        assert_eq!(merged.areas(), &[2, 2]);
        assert!(MergeRecord::new(vec![0, 0, 2, 2], vec![0.0; 4], 3).is_err());
        assert!(t.regions.merge(&[0, 0, 2, 2], 3).is_err());
    }

    #[test]
    fn region_validation() {
        assert!(RegionMap::new(1, 2, vec![0, 0], 2).is_err());
        assert!(RegionMap::new(1, 2, vec![0, 3], 2).is_err());
        assert!(RegionMap::new(1, 3, vec![0, 1], 2).is_err());
    }

    #[test]
    fn grid_regions_are_squares() {
        let g = RegionMap::grid(8, 8, 2).unwrap();
        assert_eq!(g.num_tokens(), 16);
        assert!(g.all_square());
        assert!(g.areas().iter().all(|&a| a == 4));
        let odd = RegionMap::new(1, 2, vec![0, 0], 1).unwrap();
        assert!(!odd.all_square());
    }
}
