//! Token-by-clip semantic alignment maps.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{FsanError, Result};
use crate::layers::{Forward, ParamBuilder};
use crate::tensor::{ParamId, Tensor, Var};

pub const NORM_EPS: f64 = 1e-12;

/// Projections `W_s: d_l×d_s` and `W_v: d_l×d_v` into the shared latent space.
#[derive(Clone, Debug)]
pub struct SapParams {
    pub w_s: ParamId,
    pub w_v: ParamId,
    pub d_l: usize,
}

impl SapParams {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, d_l: usize, d_s: usize, d_v: usize) -> Self {
        b.scope("sap", |b| SapParams {
            w_s: b.xavier("w_s", d_l, d_s),
            w_v: b.xavier("w_v", d_l, d_v),
            d_l,
        })
    }
}

/// `P = Norm(W_s S''ᵀ)ᵀ · Norm(W_v V''ᵀ)`: cosine similarity of every
/// projected token with every projected clip, as an `N_s×N_v` tape value.
pub fn compute_sap(fw: &mut Forward<'_>, s: Var, v: Var, p: &SapParams) -> Result<Var> {
    let st = fw.tape.transpose(s)?;
    let ts = fw.tape.matmul(fw.p(p.w_s), st)?;
    let ts = fw.tape.l2_normalize_columns(ts, NORM_EPS)?;
    let vt = fw.tape.transpose(v)?;
    let tv = fw.tape.matmul(fw.p(p.w_v), vt)?;
    let tv = fw.tape.l2_normalize_columns(tv, NORM_EPS)?;
    let tst = fw.tape.transpose(ts)?;
    fw.tape.matmul(tst, tv)
}

/// Alignment values with a per-token activity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMap {
    values: Tensor,
    row_mask: Vec<bool>,
}

impl AlignmentMap {
    /// All rows active.
    pub fn new(values: Tensor) -> Result<Self> {
        let n = if values.rank() == 2 {
            values.rows()
        } else {
            return Err(FsanError::Shape {
                shape: values.shape().to_vec(),
                reason: "alignment map must be N_s×N_v".into(),
            });
        };
        Ok(AlignmentMap {
            values,
            row_mask: vec![true; n],
        })
    }

    pub fn with_mask(values: Tensor, row_mask: Vec<bool>) -> Result<Self> {
        let mut m = Self::new(values)?;
        if row_mask.len() != m.n_tokens() {
            return Err(FsanError::dim("row_mask", &[m.n_tokens()], &[row_mask.len()]));
        }
        m.row_mask = row_mask;
        Ok(m)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor {
        &mut self.values
    }

    pub fn row_mask(&self) -> &[bool] {
        &self.row_mask
    }

    pub fn n_tokens(&self) -> usize {
        self.values.rows()
    }

    pub fn n_clips(&self) -> usize {
        self.values.cols()
    }

    pub fn active_rows(&self) -> Vec<usize> {
        (0..self.n_tokens()).filter(|&i| self.row_mask[i]).collect()
    }
}

/// `false` for every negative token that also occurs in the positive sentence.
pub fn repeated_token_mask(pos_tokens: &[usize], neg_tokens: &[usize]) -> Vec<bool> {
    let pos: HashSet<usize> = pos_tokens.iter().copied().collect();
    neg_tokens.iter().map(|t| !pos.contains(t)).collect()
}

/// CSV with a header row of clip indices and one row per token.
pub fn map_to_csv(map: &AlignmentMap, tokens: &[String]) -> Result<String> {
    if tokens.len() != map.n_tokens() {
        return Err(FsanError::dim("map_to_csv", &[map.n_tokens()], &[tokens.len()]));
    }
    let mut out = String::from("token");
    for j in 0..map.n_clips() {
        write!(out, ",{j}").unwrap();
    }
    out.push('\n');
    for (i, tok) in tokens.iter().enumerate() {
        out.push_str(tok);
        for v in map.values().row(i) {
            write!(out, ",{v:.6}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_map(path: &Path, map: &AlignmentMap, tokens: &[String]) -> Result<()> {
    fs::write(path, map_to_csv(map, tokens)?).map_err(|e| FsanError::io(path, e))
}

/// Parses [`map_to_csv`] output back into tokens and values.
pub fn parse_map_csv(text: &str) -> Result<(Vec<String>, Tensor)> {
    let bad = |line: usize, reason: String| FsanError::Parse {
        path: "<map csv>".into(),
        line: Some(line),
        offset: None,
        reason,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "empty file".into()))?;
    let n_clips = header.split(',').count() - 1;
    let mut tokens = Vec::new();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let mut cells = line.split(',');
        tokens.push(cells.next().unwrap_or_default().to_owned());
        let row = cells
            .map(|c| c.parse::<f64>().map_err(|e| bad(n + 2, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != n_clips {
            return Err(bad(n + 2, format!("expected {n_clips} cells, found {}", row.len())));
        }
        rows.push(row);
    }
    Ok((tokens, Tensor::from_rows(&rows)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamStore, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sap(d: usize, d_l: usize) -> (ParamStore, SapParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = {
            let mut b = ParamBuilder::new(&mut store, &mut rng);
            SapParams::new(&mut b, d_l, d, d)
        };
        (store, p)
    }

    fn run(store: &ParamStore, p: &SapParams, s: &Tensor, v: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut fw = Forward::eval(&mut tape, &vars);
        let (sv, vv) = (fw.tape.constant(s.clone()), fw.tape.constant(v.clone()));
        let out = compute_sap(&mut fw, sv, vv, p).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn aligned_and_orthogonal_entries() {
        let (mut store, p) = sap(2, 2);
        *store.get_mut(p.w_s) = Tensor::identity(2);
        *store.get_mut(p.w_v) = Tensor::identity(2);
        let s = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![5.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let out = run(&store, &p, &s, &v);
        assert!((out.at(0, 0) - 1.0).abs() < 1e-15);
        assert!(out.at(0, 1).abs() < 1e-15);
    }

    #[test]
    fn bounded_and_scale_invariant() {
        let (store, p) = sap(6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let v = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let out = run(&store, &p, &s, &v);
        assert_eq!(out.shape(), &[3, 5]);
        assert!(out.data().iter().all(|x| x.abs() <= 1.0 + 1e-9));
        let doubled = run(&store, &p, &s.map(|x| 2.0 * x), &v);
        assert!(out.max_abs_diff(&doubled) < 1e-9);
    }

    #[test]
    fn masking_by_token_id() {
        assert_eq!(repeated_token_mask(&[1, 2], &[2, 3]), vec![false, true]);
        assert_eq!(repeated_token_mask(&[1, 2], &[3, 4]), vec![true, true]);
        assert_eq!(repeated_token_mask(&[1, 2], &[1, 2]), vec![false, false]);
        assert_eq!(repeated_token_mask(&[0], &[0, 5]), vec![false, true]);
    }

    #[test]
    fn csv_round_trip() {
        let values = Tensor::from_rows(&[vec![0.1234567, -1.0], vec![0.5, 1.0 / 3.0]]).unwrap();
        let map = AlignmentMap::new(values.clone()).unwrap();
        let tokens = vec!["a".to_owned(), "b".to_owned()];
        let csv = map_to_csv(&map, &tokens).unwrap();
        assert!(csv.starts_with("token,0,1\na,0.123457,-1.000000\n"));
        let (toks, back) = parse_map_csv(&csv).unwrap();
        assert_eq!(toks, tokens);
        assert!(back.max_abs_diff(&values) <= 1e-6);
    }

    #[test]
    fn mask_length_checked() {
        assert!(AlignmentMap::with_mask(Tensor::zeros(&[2, 3]), vec![true]).is_err());
    }
}
