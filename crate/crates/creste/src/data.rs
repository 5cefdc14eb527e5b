//! Observation container, CSV ingestion/validation, and discrete-covariate
//! cell stratification.
//!
//! A frame holds the sample {Y_i, D_i, V_i, X_i} with the covariates split
//! into continuous and discrete blocks. Discreteness is declared by the
//! schema, never inferred. The regression design row is
//! `Z_i = (D_i, 1, x_cont_i, x_disc_i)` with the constant always prepended
//! internally; callers never supply it. Missing values are rejected, not
//! imputed.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{ColumnRole, Error, Result};

/// Maps CSV column names to their roles. Every covariate must be tagged
/// continuous or discrete explicitly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSchema {
    pub response: String,
    pub treatment: String,
    pub instrument: String,
    pub continuous: Vec<String>,
    pub discrete: Vec<String>,
}

/// Level table of one discrete column: code -> original text, used to
/// re-serialize exactly what was parsed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiscreteLevels {
    pub levels: Vec<(i64, String)>,
}

impl DiscreteLevels {
    pub fn label(&self, code: i64) -> String {
        self.levels
            .iter()
            .find(|(c, _)| *c == code)
            .map(|(_, s)| s.clone())
            .unwrap_or_else(|| code.to_string())
    }
}

/// The validated sample. Immutable after construction; safe to share
/// read-only across parallel workers.
#[derive(Debug, Clone)]
pub struct ObservationFrame {
    y: Vec<f64>,
    d: Vec<u8>,
    v: Vec<u8>,
    x_cont: Vec<f64>, // row-major, n x p_cont
    x_disc: Vec<i64>, // row-major, n x p_disc
    p_cont: usize,
    p_disc: usize,
    includes_intercept: bool,
    cont_names: Vec<String>,
    disc_names: Vec<String>,
    disc_levels: Vec<DiscreteLevels>,
    response_name: String,
    treatment_name: String,
    instrument_name: String,
}

impl ObservationFrame {
    /// Build a frame from raw columns, validating the data-model invariants.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        y: Vec<f64>,
        d: Vec<u8>,
        v: Vec<u8>,
        x_cont: Vec<f64>,
        p_cont: usize,
        x_disc: Vec<i64>,
        p_disc: usize,
        cont_names: Vec<String>,
        disc_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        if d.len() != n
            || v.len() != n
            || x_cont.len() != n * p_cont
            || x_disc.len() != n * p_disc
            || cont_names.len() != p_cont
            || disc_names.len() != p_disc
        {
            return Err(Error::InvalidArgument(
                "all columns must share the same number of rows".into(),
            ));
        }
        for (i, &yi) in y.iter().enumerate() {
            if !yi.is_finite() {
                return Err(Error::NonFinite { column: "y".into(), row: i + 1 });
            }
        }
        for (i, &di) in d.iter().enumerate() {
            if di > 1 {
                return Err(Error::NonBinary { role: ColumnRole::Treatment, row: i + 1 });
            }
        }
        for (i, &vi) in v.iter().enumerate() {
            if vi > 1 {
                return Err(Error::NonBinary { role: ColumnRole::Instrument, row: i + 1 });
            }
        }
        for (idx, &x) in x_cont.iter().enumerate() {
            if !x.is_finite() {
                let row = idx / p_cont.max(1) + 1;
                let col = cont_names.get(idx % p_cont.max(1)).cloned().unwrap_or_default();
                return Err(Error::NonFinite { column: col, row });
            }
        }
        let disc_levels = (0..p_disc)
            .map(|j| {
                let mut codes: Vec<i64> = (0..n).map(|i| x_disc[i * p_disc + j]).collect();
                codes.sort_unstable();
                codes.dedup();
                DiscreteLevels {
                    levels: codes.into_iter().map(|c| (c, c.to_string())).collect(),
                }
            })
            .collect();
        Ok(Self {
            y,
            d,
            v,
            x_cont,
            x_disc,
            p_cont,
            p_disc,
            includes_intercept: true,
            cont_names,
            disc_names,
            disc_levels,
            response_name: "y".into(),
            treatment_name: "d".into(),
            instrument_name: "v".into(),
        })
    }

    /// Parse a comma-separated file (header row, UTF-8) under `schema`.
    /// Row order is preserved; rows are reported 1-based excluding the header.
    pub fn load_csv<P: AsRef<Path>>(path: P, schema: &ColumnSchema) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(file, schema)
    }

    pub fn read_csv<R: Read>(reader: R, schema: &ColumnSchema) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers: Vec<String> =
            rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();

        let col_index = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn { column: name.to_string() })
        };

        let iy = col_index(&schema.response)?;
        let id = col_index(&schema.treatment)?;
        let iv = col_index(&schema.instrument)?;
        let icont: Vec<usize> =
            schema.continuous.iter().map(|c| col_index(c)).collect::<Result<_>>()?;
        let idisc: Vec<usize> =
            schema.discrete.iter().map(|c| col_index(c)).collect::<Result<_>>()?;

        let p_cont = icont.len();
        let p_disc = idisc.len();

        let mut y = Vec::new();
        let mut d = Vec::new();
        let mut v = Vec::new();
        let mut x_cont = Vec::new();
        let mut disc_text: Vec<Vec<String>> = vec![Vec::new(); p_disc];

        let parse_real = |field: &str, column: &str, row: usize| -> Result<f64> {
            let t = field.trim();
            if t.is_empty() {
                return Err(Error::MissingValue { column: column.to_string(), row });
            }
            let x: f64 = t
                .parse()
                .map_err(|_| Error::NonNumeric { column: column.to_string(), row })?;
            if !x.is_finite() {
                return Err(Error::NonFinite { column: column.to_string(), row });
            }
            Ok(x)
        };

        for (rec_idx, record) in rdr.records().enumerate() {
            let record = record?;
            let row = rec_idx + 1;
            let field = |i: usize| record.get(i).unwrap_or("");

            y.push(parse_real(field(iy), &schema.response, row)?);

            let dval = parse_real(field(id), &schema.treatment, row)?;
            if dval != 0.0 && dval != 1.0 {
                return Err(Error::NonBinary { role: ColumnRole::Treatment, row });
            }
            d.push(dval as u8);

            let vval = parse_real(field(iv), &schema.instrument, row)?;
            if vval != 0.0 && vval != 1.0 {
                return Err(Error::NonBinary { role: ColumnRole::Instrument, row });
            }
            v.push(vval as u8);

            for (k, &ci) in icont.iter().enumerate() {
                x_cont.push(parse_real(field(ci), &schema.continuous[k], row)?);
            }
            for (k, &di) in idisc.iter().enumerate() {
                let t = field(di).trim();
                if t.is_empty() {
                    return Err(Error::MissingValue { column: schema.discrete[k].clone(), row });
                }
                disc_text[k].push(t.to_string());
            }
        }
        let n = y.len();
        if n == 0 {
            return Err(Error::EmptyInput);
        }

        // Integer-valued discrete columns keep their integer as the code
        // (JTPA-style pre-encoded dummies pass through unchanged); otherwise
        // codes are assigned by sorted distinct label.
        let mut x_disc = vec![0i64; n * p_disc];
        let mut disc_levels = Vec::with_capacity(p_disc);
        for k in 0..p_disc {
            let all_int = disc_text[k].iter().all(|t| t.parse::<i64>().is_ok());
            let mut levels: BTreeMap<i64, String> = BTreeMap::new();
            if all_int {
                for (i, t) in disc_text[k].iter().enumerate() {
                    let code: i64 = t.parse().unwrap();
                    x_disc[i * p_disc + k] = code;
                    levels.entry(code).or_insert_with(|| t.clone());
                }
            } else {
                let mut labels: Vec<&String> = disc_text[k].iter().collect();
                labels.sort();
                labels.dedup();
                let code_of: BTreeMap<&String, i64> =
                    labels.iter().enumerate().map(|(c, l)| (*l, c as i64)).collect();
                for (i, t) in disc_text[k].iter().enumerate() {
                    let code = code_of[&t];
                    x_disc[i * p_disc + k] = code;
                    levels.entry(code).or_insert_with(|| t.clone());
                }
            }
            disc_levels.push(DiscreteLevels { levels: levels.into_iter().collect() });
        }

        let mut frame = Self::from_parts(
            y,
            d,
            v,
            x_cont,
            p_cont,
            x_disc,
            p_disc,
            schema.continuous.clone(),
            schema.discrete.clone(),
        )?;
        frame.disc_levels = disc_levels;
        frame.response_name = schema.response.clone();
        frame.treatment_name = schema.treatment.clone();
        frame.instrument_name = schema.instrument.clone();
        Ok(frame)
    }

    /// Serialize back to CSV. Reals use the shortest round-trip decimal form,
    /// so parse -> serialize -> parse reproduces identical values.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = vec![
            self.response_name.clone(),
            self.treatment_name.clone(),
            self.instrument_name.clone(),
        ];
        header.extend(self.cont_names.iter().cloned());
        header.extend(self.disc_names.iter().cloned());
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.n() {
            let mut fields = vec![
                format!("{}", self.y[i]),
                format!("{}", self.d[i]),
                format!("{}", self.v[i]),
            ];
            for j in 0..self.p_cont {
                fields.push(format!("{}", self.x_cont[i * self.p_cont + j]));
            }
            for j in 0..self.p_disc {
                fields.push(self.disc_levels[j].label(self.x_disc[i * self.p_disc + j]));
            }
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p_cont(&self) -> usize {
        self.p_cont
    }

    pub fn p_disc(&self) -> usize {
        self.p_disc
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn d(&self) -> &[u8] {
        &self.d
    }

    pub fn v(&self) -> &[u8] {
        &self.v
    }

    pub fn includes_intercept(&self) -> bool {
        self.includes_intercept
    }

    pub fn x_cont_at(&self, i: usize, j: usize) -> f64 {
        self.x_cont[i * self.p_cont + j]
    }

    pub fn x_cont_row(&self, i: usize) -> &[f64] {
        &self.x_cont[i * self.p_cont..(i + 1) * self.p_cont]
    }

    pub fn x_disc_at(&self, i: usize, j: usize) -> i64 {
        self.x_disc[i * self.p_disc + j]
    }

    pub fn cont_names(&self) -> &[String] {
        &self.cont_names
    }

    pub fn disc_names(&self) -> &[String] {
        &self.disc_names
    }

    /// Number of regression coefficients: treatment + intercept + covariates.
    pub fn design_dim(&self) -> usize {
        2 + self.p_cont + self.p_disc
    }

    /// Design row Z_i = (D_i, 1, x_cont_i, x_disc_i).
    pub fn design_row(&self, i: usize, out: &mut [f64]) {
        out[0] = self.d[i] as f64;
        out[1] = 1.0;
        for j in 0..self.p_cont {
            out[2 + j] = self.x_cont[i * self.p_cont + j];
        }
        for j in 0..self.p_disc {
            out[2 + self.p_cont + j] = self.x_disc[i * self.p_disc + j] as f64;
        }
    }

    pub fn design_matrix(&self) -> DMatrix<f64> {
        let k = self.design_dim();
        let mut m = DMatrix::zeros(self.n(), k);
        let mut buf = vec![0.0; k];
        for i in 0..self.n() {
            self.design_row(i, &mut buf);
            for j in 0..k {
                m[(i, j)] = buf[j];
            }
        }
        m
    }

    pub fn design_names(&self) -> Vec<String> {
        let mut names = vec![self.treatment_name.clone(), "intercept".to_string()];
        names.extend(self.cont_names.iter().cloned());
        names.extend(self.disc_names.iter().cloned());
        names
    }

    /// New frame holding the given rows (with repetition), preserving order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut y = Vec::with_capacity(idx.len());
        let mut d = Vec::with_capacity(idx.len());
        let mut v = Vec::with_capacity(idx.len());
        let mut x_cont = Vec::with_capacity(idx.len() * self.p_cont);
        let mut x_disc = Vec::with_capacity(idx.len() * self.p_disc);
        for &i in idx {
            y.push(self.y[i]);
            d.push(self.d[i]);
            v.push(self.v[i]);
            x_cont.extend_from_slice(&self.x_cont[i * self.p_cont..(i + 1) * self.p_cont]);
            x_disc.extend_from_slice(&self.x_disc[i * self.p_disc..(i + 1) * self.p_disc]);
        }
        Self {
            y,
            d,
            v,
            x_cont,
            x_disc,
            p_cont: self.p_cont,
            p_disc: self.p_disc,
            includes_intercept: self.includes_intercept,
            cont_names: self.cont_names.clone(),
            disc_names: self.disc_names.clone(),
            disc_levels: self.disc_levels.clone(),
            response_name: self.response_name.clone(),
            treatment_name: self.treatment_name.clone(),
            instrument_name: self.instrument_name.clone(),
        }
    }
}

/// Partition of observation indices into cells of identical discrete
/// covariate values. With no discrete covariates there is a single cell.
#[derive(Debug, Clone)]
pub struct CellPartition {
    /// cell index of each observation
    pub cell_of: Vec<usize>,
    /// member lists, each ascending; cells ordered by their discrete key
    pub cells: Vec<Vec<usize>>,
}

/// Group observations by their discrete covariate tuple. Deterministic:
/// cells are ordered by the code tuple, members ascending by row.
pub fn stratify(frame: &ObservationFrame) -> CellPartition {
    let n = frame.n();
    if frame.p_disc() == 0 {
        return CellPartition { cell_of: vec![0; n], cells: vec![(0..n).collect()] };
    }
    let mut groups: BTreeMap<Vec<i64>, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let key: Vec<i64> = (0..frame.p_disc()).map(|j| frame.x_disc_at(i, j)).collect();
        groups.entry(key).or_default().push(i);
    }
    let cells: Vec<Vec<usize>> = groups.into_values().collect();
    let mut cell_of = vec![0; n];
    for (c, members) in cells.iter().enumerate() {
        for &i in members {
            cell_of[i] = c;
        }
    }
    CellPartition { cell_of, cells }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema_xc() -> ColumnSchema {
        ColumnSchema {
            response: "y".into(),
            treatment: "d".into(),
            instrument: "v".into(),
            continuous: vec!["x1".into()],
            discrete: vec![],
        }
    }

    #[test]
    fn parses_three_row_csv() {
        let csv = "y,d,v,x1\n1.5,0,1,0.2\n2.0,1,1,0.4\n-0.5,0,0,0.9\n";
        let frame = ObservationFrame::read_csv(csv.as_bytes(), &schema_xc()).unwrap();
        assert_eq!(frame.n(), 3);
        assert_eq!(frame.p_cont(), 1);
        assert_eq!(frame.p_disc(), 0);
        assert_eq!(frame.y(), &[1.5, 2.0, -0.5]);
        assert_eq!(frame.d(), &[0, 1, 0]);
    }

    #[test]
    fn rejects_non_binary_treatment_with_row_location() {
        let csv = "y,d,v,x1\n1.5,0,1,0.2\n2.0,2,1,0.4\n-0.5,0,0,0.9\n";
        let err = ObservationFrame::read_csv(csv.as_bytes(), &schema_xc()).unwrap_err();
        assert_eq!(err.to_string(), "non-binary treatment at row 2");
    }

    #[test]
    fn rejects_missing_column() {
        let csv = "y,v,x1\n1.5,1,0.2\n";
        let err = ObservationFrame::read_csv(csv.as_bytes(), &schema_xc()).unwrap_err();
        assert_eq!(err.to_string(), "missing required column `d`");
    }

    #[test]
    fn rejects_non_numeric_and_missing_fields() {
        let csv = "y,d,v,x1\nfoo,0,1,0.2\n";
        let err = ObservationFrame::read_csv(csv.as_bytes(), &schema_xc()).unwrap_err();
        assert!(matches!(err, Error::NonNumeric { ref column, row: 1 } if column == "y"));

        let csv = "y,d,v,x1\n1.0,0,1,\n";
        let err = ObservationFrame::read_csv(csv.as_bytes(), &schema_xc()).unwrap_err();
        assert!(matches!(err, Error::MissingValue { ref column, row: 1 } if column == "x1"));
    }

    #[test]
    fn rejects_empty_file() {
        let err = ObservationFrame::read_csv("y,d,v,x1\n".as_bytes(), &schema_xc()).unwrap_err();
        assert!(matches!(err, Error::EmptyInput));
    }

    #[test]
    fn textual_discrete_column_encodes_and_round_trips() {
        let schema = ColumnSchema {
            response: "y".into(),
            treatment: "d".into(),
            instrument: "v".into(),
            continuous: vec![],
            discrete: vec!["site".into()],
        };
        let csv = "y,d,v,site\n1.25,0,1,B\n2.5,1,1,A\n0.125,0,0,B\n";
        let frame = ObservationFrame::read_csv(csv.as_bytes(), &schema).unwrap();
        assert_eq!(frame.p_disc(), 1);
        // sorted label order: A -> 0, B -> 1
        assert_eq!(frame.x_disc_at(0, 0), 1);
        assert_eq!(frame.x_disc_at(1, 0), 0);

        let mut out = Vec::new();
        frame.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), csv);
    }

    #[test]
    fn numeric_round_trip_is_value_exact() {
        let csv = "y,d,v,x1\n0.1,0,1,0.30000000000000004\n-1e-12,1,0,2.5\n";
        let frame = ObservationFrame::read_csv(csv.as_bytes(), &schema_xc()).unwrap();
        let mut out = Vec::new();
        frame.write_csv(&mut out).unwrap();
        let re = ObservationFrame::read_csv(&out[..], &schema_xc()).unwrap();
        assert_eq!(frame.y(), re.y());
        assert_eq!(frame.x_cont_row(0), re.x_cont_row(0));
        assert_eq!(frame.x_cont_row(1), re.x_cont_row(1));
    }

    fn frame_with_disc(codes: &[Vec<i64>]) -> ObservationFrame {
        let n = codes.len();
        let p = codes[0].len();
        let flat: Vec<i64> = codes.iter().flatten().copied().collect();
        let names = (0..p).map(|j| format!("s{j}")).collect();
        ObservationFrame::from_parts(
            vec![0.0; n],
            vec![0; n],
            vec![1; n],
            vec![],
            0,
            flat,
            p,
            vec![],
            names,
        )
        .unwrap()
    }

    #[test]
    fn stratify_without_discrete_covariates_is_single_cell() {
        let frame = ObservationFrame::from_parts(
            vec![0.0; 5],
            vec![0; 5],
            vec![1; 5],
            vec![0.0; 5],
            1,
            vec![],
            0,
            vec!["x1".into()],
            vec![],
        )
        .unwrap();
        let part = stratify(&frame);
        assert_eq!(part.cells, vec![vec![0, 1, 2, 3, 4]]);
    }

    #[test]
    fn stratify_single_binary_column() {
        let frame = frame_with_disc(&[vec![0], vec![1], vec![0], vec![1]]);
        let part = stratify(&frame);
        assert_eq!(part.cells, vec![vec![0, 2], vec![1, 3]]);
    }

    #[test]
    fn stratify_two_binary_columns_matches_bruteforce_grouping() {
        let rows: Vec<Vec<i64>> = vec![
            vec![0, 0],
            vec![0, 1],
            vec![1, 0],
            vec![1, 1],
            vec![0, 0],
            vec![0, 1],
            vec![1, 0],
            vec![1, 1],
        ];
        let frame = frame_with_disc(&rows);
        let part = stratify(&frame);
        assert_eq!(part.cells.len(), 4);
        // brute-force grouping by tuple key
        for (c, members) in part.cells.iter().enumerate() {
            assert_eq!(members.len(), 2);
            for &i in members {
                for &j in members {
                    assert_eq!(rows[i], rows[j]);
                }
                assert_eq!(part.cell_of[i], c);
            }
        }
    }

    proptest! {
        #[test]
        fn stratify_is_permutation_equivariant(
            codes in proptest::collection::vec(0i64..3, 2..24),
            seed in 0u64..1000
        ) {
            let rows: Vec<Vec<i64>> = codes.iter().map(|&c| vec![c]).collect();
            let frame = frame_with_disc(&rows);
            let part = stratify(&frame);

            // deterministic permutation from the seed
            let n = rows.len();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut s = seed.wrapping_add(1);
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let j = (s >> 33) as usize % (i + 1);
                perm.swap(i, j);
            }
            let permuted = frame.select_rows(&perm);
            let part_p = stratify(&permuted);
            // two observations share a cell iff their originals did
            for a in 0..n {
                for b in 0..n {
                    let same = part.cell_of[perm[a]] == part.cell_of[perm[b]];
                    let same_p = part_p.cell_of[a] == part_p.cell_of[b];
                    prop_assert_eq!(same, same_p);
                }
            }
        }
    }
}
