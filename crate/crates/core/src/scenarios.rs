//! Scenario files and synthetic scenario generation.
//!
//! A scenario CSV has a header row naming node ids and one scenario per row.
//! Rows of width `n` hold `v~` directly; rows of width `2n` hold active
//! injections `p` followed by reactive loads `q_load`, mapped through
//! `v~ = R p - X q_load + v0 1`.
//!
//! Synthetic sets draw from ChaCha20 (`rand_chacha::ChaCha20Rng`): the
//! generator is seeded with `seed_from_u64(seed)` and scenario `s` reads
//! stream `s`, drawing per node first the load, then the solar output.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::grid_conditions;
use crate::{Error, FeederModel, Result, Scenario};

/// Where a scenario set came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    File { path: String },
    Synthetic { seed: u64, ranges: SyntheticRanges },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    scenarios: Vec<Scenario>,
    pub provenance: Provenance,
}

impl ScenarioSet {
    pub fn new(scenarios: Vec<Scenario>, provenance: Provenance) -> Result<Self> {
        let Some(first) = scenarios.first() else {
            return Err(Error::InvalidParameter("scenario set is empty".into()));
        };
        let n = first.len();
        if let Some(s) = scenarios.iter().position(|s| s.len() != n) {
            return Err(Error::Dimension(format!(
                "scenario {s} has {} entries, scenario 0 has {n}",
                scenarios[s].len()
            )));
        }
        Ok(ScenarioSet {
            scenarios,
            provenance,
        })
    }

    pub fn scenarios(&self) -> &[Scenario] {
        &self.scenarios
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.scenarios[0].len()
    }
}

/// Reads a scenario CSV for `feeder`.
pub fn load_scenarios(path: impl AsRef<Path>, feeder: &FeederModel) -> Result<ScenarioSet> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let scenarios = read_scenarios(file, feeder).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    ScenarioSet::new(
        scenarios,
        Provenance::File {
            path: path.display().to_string(),
        },
    )
}

/// Parses scenario CSV text from any reader.
pub fn read_scenarios(reader: impl Read, feeder: &FeederModel) -> Result<Vec<Scenario>> {
    let n = feeder.n_nodes();
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let width = csv.headers().map_err(|e| Error::Parse(e.to_string()))?.len();
    if width != n && width != 2 * n {
        return Err(Error::Dimension(format!(
            "header has {width} columns; expected {n} (v~) or {} (p, q_load)",
            2 * n
        )));
    }
    let mut out = Vec::new();
    for (row, record) in csv.records().enumerate() {
        // data rows are numbered from 1, the header being row 0
        let row = row + 1;
        let record = record.map_err(|e| Error::Parse(format!("row {row}: {e}")))?;
        if record.len() != width {
            return Err(Error::Parse(format!(
                "row {row} has {} columns, header has {width}",
                record.len()
            )));
        }
        let values = record
            .iter()
            .enumerate()
            .map(|(col, cell)| {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse(format!("row {row}, column {col}: bad number {cell:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let scenario = if width == n {
            Scenario::new(DVector::from_vec(values))?
        } else {
            let p = DVector::from_column_slice(&values[..n]);
            let q_load = DVector::from_column_slice(&values[n..]);
            grid_conditions(feeder, &p, &q_load)?
        };
        out.push(scenario);
    }
    if out.is_empty() {
        return Err(Error::Parse("no scenario rows".into()));
    }
    Ok(out)
}

/// Writes `v~` rows under a header of node ids.
pub fn write_scenarios(writer: impl Write, scenarios: &[Scenario]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    let n = scenarios.first().map_or(0, Scenario::len);
    let to_err = |e: csv::Error| Error::Parse(e.to_string());
    csv.write_record((0..n).map(|i| i.to_string())).map_err(to_err)?;
    for s in scenarios {
        csv.write_record(s.v_tilde.iter().map(|v| format!("{v:?}"))).map_err(to_err)?;
    }
    csv.flush().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

/// Per-node uniform sampling ranges, p.u.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRanges {
    pub load: (f64, f64),
    pub solar: (f64, f64),
    /// Reactive load as a fraction of active load.
    pub reactive_ratio: f64,
}

impl Default for SyntheticRanges {
    fn default() -> Self {
        SyntheticRanges {
            load: (0.0, 0.1),
            solar: (0.0, 0.2),
            reactive_ratio: 0.3,
        }
    }
}

fn draw(rng: &mut ChaCha20Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Draws `count` scenarios: per node, `p = solar - load` and
/// `q_load = reactive_ratio * load`.
pub fn generate_synthetic(
    feeder: &FeederModel,
    count: usize,
    ranges: SyntheticRanges,
    seed: u64,
) -> Result<ScenarioSet> {
    if count == 0 {
        return Err(Error::InvalidParameter("scenario count must be at least 1".into()));
    }
    let finite = [ranges.load.0, ranges.load.1, ranges.solar.0, ranges.solar.1, ranges.reactive_ratio];
    if finite.iter().any(|v| !v.is_finite()) || ranges.load.0 > ranges.load.1 || ranges.solar.0 > ranges.solar.1
    {
        return Err(Error::InvalidParameter(format!("bad sampling ranges {ranges:?}")));
    }
    let n = feeder.n_nodes();
    let scenarios = (0..count)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            let mut p = DVector::zeros(n);
            let mut q_load = DVector::zeros(n);
            for i in 0..n {
                let load = draw(&mut rng, ranges.load);
                let solar = draw(&mut rng, ranges.solar);
                p[i] = solar - load;
                q_load[i] = ranges.reactive_ratio * load;
            }
            grid_conditions(feeder, &p, &q_load)
        })
        .collect::<Result<Vec<_>>>()?;
    ScenarioSet::new(scenarios, Provenance::Synthetic { seed, ranges })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_radial_feeder, Branch};

    fn toy() -> FeederModel {
        let branches = [
            Branch { from: 0, to: 1, r: 0.1, x: 0.2 },
            Branch { from: 1, to: 2, r: 0.1, x: 0.2 },
        ];
        let f = build_radial_feeder(&branches, 1.0).unwrap();
        f.with_ders(vec![0, 1], vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn zero_ranges_give_flat_voltage() {
        let f = toy();
        let ranges = SyntheticRanges {
            load: (0.0, 0.0),
            solar: (0.0, 0.0),
            reactive_ratio: 0.3,
        };
        let set = generate_synthetic(&f, 5, ranges, 1).unwrap();
        assert!(set.scenarios().iter().all(|s| s.v_tilde.iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn generation_is_seeded() {
        let f = toy();
        let a = generate_synthetic(&f, 80, SyntheticRanges::default(), 7).unwrap();
        let b = generate_synthetic(&f, 80, SyntheticRanges::default(), 7).unwrap();
        let c = generate_synthetic(&f, 80, SyntheticRanges::default(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.scenarios(), c.scenarios());
        assert_eq!(a.len(), 80);
        let base = crate::equilibrium::baseline_objective(a.scenarios()).unwrap();
        assert!(base > 0.0);
        assert!(generate_synthetic(&f, 0, SyntheticRanges::default(), 7).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let f = toy();
        let set = generate_synthetic(&f, 80, SyntheticRanges::default(), 3).unwrap();
        let mut buf = Vec::new();
        write_scenarios(&mut buf, set.scenarios()).unwrap();
        let back = read_scenarios(buf.as_slice(), &f).unwrap();
        assert_eq!(back.len(), 80);
        assert_eq!(back.as_slice(), set.scenarios());
    }

    #[test]
    fn double_width_rows_are_mapped() {
        let f = toy();
        let text = "p0,p1,q0,q1\n0.1,0.0,0.0,0.05\n";
        let s = read_scenarios(text.as_bytes(), &f).unwrap();
        let expect = grid_conditions(
            &f,
            &DVector::from_vec(vec![0.1, 0.0]),
            &DVector::from_vec(vec![0.0, 0.05]),
        )
        .unwrap();
        assert_eq!(s[0], expect);
    }

    #[test]
    fn malformed_files_name_the_row() {
        let f = toy();
        let err = read_scenarios("a,b\n1.0,1.0\n1.0\n".as_bytes(), &f).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
        let err = read_scenarios("a,b\n1.0,x\n".as_bytes(), &f).unwrap_err();
        assert!(err.to_string().contains("row 1, column 1"), "{err}");
        assert!(read_scenarios("a,b,c\n1,1,1\n".as_bytes(), &f).is_err());
        assert!(read_scenarios("a,b\n".as_bytes(), &f).is_err());
    }

    #[test]
    fn load_from_file() {
        let f = toy();
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "1,2").unwrap();
        for _ in 0..80 {
            writeln!(file, "1.01,0.99").unwrap();
        }
        let set = load_scenarios(file.path(), &f).unwrap();
        assert_eq!(set.len(), 80);
        assert!(matches!(set.provenance, Provenance::File { .. }));
    }
}
