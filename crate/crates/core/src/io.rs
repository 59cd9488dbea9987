//! CSV and JSON data files with schema validation.
//!
//! Readers report the offending line (header = line 1) in
//! [`Error::Schema`]. Floats are written in shortest round-trip form, so
//! storing and loading returns identical values.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::dynamics::{ChoiceTrajectory, CountSeries};
use crate::error::{Error, Result};
use crate::inference::PredictiveBand;
use crate::network::CostSequence;
use crate::sampler::PosteriorDraws;

pub const TRAJECTORY_HEADER: [&str; 4] = ["od_id", "commuter_id", "day", "choice"];
pub const COUNT_HEADER: [&str; 4] = ["od_id", "day", "route_id", "count"];
pub const COST_HEADER: [&str; 4] = ["od_id", "day", "route_id", "cost"];
pub const BAND_HEADER: [&str; 7] = ["day", "route_id", "mean", "lo50", "hi50", "lo95", "hi95"];

fn schema(file: &str, row: usize, message: impl Into<String>) -> Error {
    Error::Schema {
        file: file.to_string(),
        row,
        message: message.into(),
    }
}

struct Table {
    file: String,
    header: Vec<String>,
    /// `(line, fields)`
    rows: Vec<(usize, Vec<String>)>,
}

impl Table {
    fn read<R: Read>(reader: R, file: &str) -> Result<Table> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| schema(file, 1, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                schema(file, line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            rows.push((line, rec.iter().map(str::to_string).collect()));
        }
        Ok(Table {
            file: file.to_string(),
            header,
            rows,
        })
    }

    fn expect_header(&self, expected: &[&str]) -> Result<()> {
        if self.header != expected {
            return Err(schema(
                &self.file,
                1,
                format!(
                    "expected header '{}', found '{}'",
                    expected.join(","),
                    self.header.join(",")
                ),
            ));
        }
        Ok(())
    }

    fn parse<T: FromStr>(&self, line: usize, fields: &[String], col: usize) -> Result<T> {
        fields[col].parse().map_err(|_| {
            schema(
                &self.file,
                line,
                format!("column '{}': cannot parse '{}'", self.header[col], fields[col]),
            )
        })
    }
}

/// Dense `[day][slot]` table from keyed rows, rejecting duplicates, gaps and
/// slots outside `lo..=hi`.
struct Grid<T> {
    cells: BTreeMap<(u32, usize, usize), (usize, T)>,
}

impl<T: Copy> Grid<T> {
    fn new() -> Self {
        Grid { cells: BTreeMap::new() }
    }

    fn insert(&mut self, file: &str, line: usize, key: (u32, usize, usize), value: T) -> Result<()> {
        if let Some((first, _)) = self.cells.insert(key, (line, value)) {
            return Err(schema(file, line, format!("duplicate of line {first}")));
        }
        Ok(())
    }

    fn ods(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.cells.keys().map(|k| k.0).collect();
        v.dedup();
        v
    }

    /// Rows `1..=max outer` by slots `lo..=hi`.
    fn dense(&self, file: &str, od: u32, lo: usize, hi: usize, outer: &str, inner: &str) -> Result<Vec<Vec<T>>> {
        let cells: Vec<_> = self.cells.range((od, 0, 0)..=(od, usize::MAX, usize::MAX)).collect();
        let max_outer = cells.iter().map(|(k, _)| k.1).max().unwrap_or(0);
        let mut out = Vec::with_capacity(max_outer);
        let mut it = cells.into_iter().peekable();
        for a in 1..=max_outer {
            let mut row = Vec::with_capacity(hi - lo + 1);
            for b in lo..=hi {
                match it.peek() {
                    Some((k, (_, v))) if **k == (od, a, b) => {
                        row.push(*v);
                        it.next();
                    }
                    Some((_, (line, _))) => {
                        return Err(schema(
                            file,
                            *line,
                            format!("od {od}: missing {outer} {a}, {inner} {b}"),
                        ));
                    }
                    None => return Err(schema(file, 0, format!("od {od}: missing {outer} {a}, {inner} {b}"))),
                }
            }
            out.push(row);
        }
        Ok(out)
    }
}

fn index(t: &Table, line: usize, f: &[String], col: usize, min: usize) -> Result<usize> {
    let v: usize = t.parse(line, f, col)?;
    if v < min {
        return Err(schema(
            &t.file,
            line,
            format!("column '{}' must be at least {min}", t.header[col]),
        ));
    }
    Ok(v)
}

/// Trajectories grouped by OD pair, ordered by `od_id`. `routes_of` gives the
/// route count `M` of each OD; choices must lie in `0..=M`.
pub fn read_trajectories<R: Read>(
    reader: R,
    file: &str,
    routes_of: impl Fn(u32) -> Option<usize>,
) -> Result<Vec<ChoiceTrajectory>> {
    let t = Table::read(reader, file)?;
    t.expect_header(&TRAJECTORY_HEADER)?;
    let mut grid = Grid::new();
    for (line, f) in &t.rows {
        let od: u32 = t.parse(*line, f, 0)?;
        let n = index(&t, *line, f, 1, 1)?;
        let day = index(&t, *line, f, 2, 1)?;
        let choice: u16 = t.parse(*line, f, 3)?;
        let m = routes_of(od).ok_or_else(|| schema(file, *line, format!("od {od} has no route information")))?;
        if choice as usize > m {
            return Err(schema(file, *line, format!("choice {choice} outside 0..={m}")));
        }
        grid.insert(file, *line, (od, n, day), choice)?;
    }
    if grid.cells.is_empty() {
        return Err(schema(file, 1, "no data rows"));
    }
    grid.ods()
        .into_iter()
        .map(|od| {
            let days = grid
                .cells
                .range((od, 0, 0)..=(od, usize::MAX, usize::MAX))
                .map(|(k, _)| k.2)
                .max()
                .unwrap_or(0);
            let rows = grid.dense(file, od, 1, days, "commuter", "day")?;
            ChoiceTrajectory::new(od, routes_of(od).unwrap_or(0), rows)
        })
        .collect()
}

pub fn write_trajectories<W: Write>(writer: W, trajectories: &[ChoiceTrajectory]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TRAJECTORY_HEADER)?;
    for tr in trajectories {
        for n in 0..tr.commuters() {
            for (t, &c) in tr.commuter(n).iter().enumerate() {
                w.write_record(&[
                    tr.od_id.to_string(),
                    (n + 1).to_string(),
                    (t + 1).to_string(),
                    c.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Count series grouped by OD pair. Without `pad_to`, every day must list
/// routes `0..=M` and share one total. With `pad_to = K`, the non-travel row
/// may be omitted and is topped up so that each day sums to `K`.
pub fn read_counts<R: Read>(reader: R, file: &str, pad_to: Option<u32>) -> Result<Vec<CountSeries>> {
    let t = Table::read(reader, file)?;
    t.expect_header(&COUNT_HEADER)?;
    let mut grid = Grid::new();
    for (line, f) in &t.rows {
        let od: u32 = t.parse(*line, f, 0)?;
        let day = index(&t, *line, f, 1, 1)?;
        let route = index(&t, *line, f, 2, 0)?;
        let count: u32 = t.parse(*line, f, 3)?;
        grid.insert(file, *line, (od, day, route), count)?;
    }
    if pad_to.is_some() {
        let keys: Vec<(u32, usize)> = grid.cells.keys().map(|k| (k.0, k.1)).collect();
        for (od, day) in keys {
            grid.cells.entry((od, day, 0)).or_insert((0, 0));
        }
    }
    if grid.cells.is_empty() {
        return Err(schema(file, 1, "no data rows"));
    }
    grid.ods()
        .into_iter()
        .map(|od| {
            let m = grid
                .cells
                .range((od, 0, 0)..=(od, usize::MAX, usize::MAX))
                .map(|(k, _)| k.2)
                .max()
                .unwrap_or(0);
            let rows = grid.dense(file, od, 0, m, "day", "route")?;
            let first_line = |day: usize| grid.cells.get(&(od, day, m)).map_or(0, |c| c.0);
            if let Some(k) = pad_to {
                return CountSeries::padded(od, rows, k).map_err(|e| schema(file, 0, format!("od {od}: {e}")));
            }
            let total: u32 = rows[0].iter().sum();
            for (d, row) in rows.iter().enumerate() {
                let s: u32 = row.iter().sum();
                if s != total {
                    return Err(schema(
                        file,
                        first_line(d + 1),
                        format!("od {od} day {}: counts sum to {s}, expected {total}", d + 1),
                    ));
                }
            }
            CountSeries::new(od, rows)
        })
        .collect()
}

pub fn write_counts<W: Write>(writer: W, series: &[CountSeries]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(COUNT_HEADER)?;
    for s in series {
        for t in 0..s.days() {
            for (i, c) in s.day(t).iter().enumerate() {
                w.write_record(&[s.od_id.to_string(), (t + 1).to_string(), i.to_string(), c.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// One cost sequence per OD pair, ordered by `od_id`; routes are `1..=M`.
pub fn read_costs<R: Read>(reader: R, file: &str) -> Result<Vec<CostSequence>> {
    let t = Table::read(reader, file)?;
    t.expect_header(&COST_HEADER)?;
    let mut grid = Grid::new();
    for (line, f) in &t.rows {
        let od: u32 = t.parse(*line, f, 0)?;
        let day = index(&t, *line, f, 1, 1)?;
        let route = index(&t, *line, f, 2, 1)?;
        let cost: f64 = t.parse(*line, f, 3)?;
        if !(cost.is_finite() && cost >= 0.0) {
            return Err(schema(
                file,
                *line,
                format!("cost {cost} is not finite and nonnegative"),
            ));
        }
        grid.insert(file, *line, (od, day, route), cost)?;
    }
    if grid.cells.is_empty() {
        return Err(schema(file, 1, "no data rows"));
    }
    grid.ods()
        .into_iter()
        .map(|od| {
            let m = grid
                .cells
                .range((od, 0, 0)..=(od, usize::MAX, usize::MAX))
                .map(|(k, _)| k.2)
                .max()
                .unwrap_or(0);
            let rows = grid.dense(file, od, 1, m, "day", "route")?;
            CostSequence::new(od, rows).map_err(|e| schema(file, 0, format!("od {od}: {e}")))
        })
        .collect()
}

pub fn write_costs<W: Write>(writer: W, costs: &[CostSequence]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(COST_HEADER)?;
    for c in costs {
        for (t, row) in c.rows().enumerate() {
            for (i, v) in row.iter().enumerate() {
                w.write_record(&[
                    c.od_id.to_string(),
                    (t + 1).to_string(),
                    (i + 1).to_string(),
                    v.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Constrained draws with 1-based `chain` and `draw` columns.
pub fn write_draws<W: Write>(writer: W, draws: &PosteriorDraws) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["chain".to_string(), "draw".to_string(), "divergent".to_string()];
    header.extend(draws.names.iter().cloned());
    w.write_record(&header)?;
    let mut within = 0;
    for (k, row) in draws.samples.iter().enumerate() {
        within = if k > 0 && draws.chain_id[k] == draws.chain_id[k - 1] {
            within + 1
        } else {
            1
        };
        let mut rec = vec![
            (draws.chain_id[k] + 1).to_string(),
            within.to_string(),
            (draws.divergent[k] as u8).to_string(),
        ];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_draws<R: Read>(reader: R, file: &str) -> Result<PosteriorDraws> {
    let t = Table::read(reader, file)?;
    if t.header.len() < 4 || t.header[..3] != ["chain", "draw", "divergent"] {
        return Err(schema(
            file,
            1,
            "expected header 'chain,draw,divergent,<parameters...>'",
        ));
    }
    let names: Vec<String> = t.header[3..].to_vec();
    let mut seen = std::collections::HashSet::new();
    if let Some(d) = names.iter().find(|n| !seen.insert(n.as_str())) {
        return Err(schema(file, 1, format!("duplicate column '{d}'")));
    }
    let mut chain_id = Vec::new();
    let mut divergent = Vec::new();
    let mut samples = Vec::new();
    let mut expected_draw = 0;
    for (line, f) in &t.rows {
        let chain = index(&t, *line, f, 0, 1)? - 1;
        let draw = index(&t, *line, f, 1, 1)?;
        let div = match f[2].as_str() {
            "0" | "false" => false,
            "1" | "true" => true,
            other => {
                return Err(schema(
                    file,
                    *line,
                    format!("column 'divergent': cannot parse '{other}'"),
                ))
            }
        };
        let new_chain = chain_id.last() != Some(&chain);
        if new_chain {
            if chain != chain_id.last().map_or(0, |c| c + 1) {
                return Err(schema(file, *line, format!("chain {} out of order", chain + 1)));
            }
            expected_draw = 1;
        }
        if draw != expected_draw {
            return Err(schema(
                file,
                *line,
                format!("expected draw {expected_draw}, found {draw}"),
            ));
        }
        expected_draw += 1;
        let row = (3..f.len())
            .map(|c| t.parse::<f64>(*line, f, c))
            .collect::<Result<Vec<_>>>()?;
        if let Some(c) = row.iter().position(|v| !v.is_finite()) {
            return Err(schema(file, *line, format!("column '{}' is not finite", names[c])));
        }
        chain_id.push(chain);
        divergent.push(div);
        samples.push(row);
    }
    PosteriorDraws::from_rows(names, chain_id, divergent, samples).map_err(|e| schema(file, 0, e.to_string()))
}

pub fn write_bands<W: Write>(writer: W, bands: &[PredictiveBand]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(BAND_HEADER)?;
    for b in bands {
        w.serialize((b.day, b.route_id, b.mean, b.lo50, b.hi50, b.lo95, b.hi95))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bands<R: Read>(reader: R, file: &str) -> Result<Vec<PredictiveBand>> {
    let t = Table::read(reader, file)?;
    t.expect_header(&BAND_HEADER)?;
    t.rows
        .iter()
        .map(|(line, f)| {
            Ok(PredictiveBand {
                day: t.parse(*line, f, 0)?,
                route_id: t.parse(*line, f, 1)?,
                mean: t.parse(*line, f, 2)?,
                lo50: t.parse(*line, f, 3)?,
                hi50: t.parse(*line, f, 4)?,
                lo95: t.parse(*line, f, 5)?,
                hi95: t.parse(*line, f, 6)?,
            })
        })
        .collect()
}

fn label(path: &Path) -> String {
    path.display().to_string()
}

pub fn load_trajectories(path: &Path, routes_of: impl Fn(u32) -> Option<usize>) -> Result<Vec<ChoiceTrajectory>> {
    read_trajectories(File::open(path)?, &label(path), routes_of)
}

pub fn load_counts(path: &Path, pad_to: Option<u32>) -> Result<Vec<CountSeries>> {
    read_counts(File::open(path)?, &label(path), pad_to)
}

pub fn load_costs(path: &Path) -> Result<Vec<CostSequence>> {
    read_costs(File::open(path)?, &label(path))
}

pub fn load_draws(path: &Path) -> Result<PosteriorDraws> {
    read_draws(File::open(path)?, &label(path))
}

/// Pretty JSON with a trailing newline.
pub fn save_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{anonymize, simulate_pooled, Behavior};
    use proptest::prelude::*;

    fn traj_bytes(t: &[ChoiceTrajectory]) -> Vec<u8> {
        let mut buf = Vec::new();
        write_trajectories(&mut buf, t).unwrap();
        buf
    }

    fn row_of(err: Error) -> usize {
        match err {
            Error::Schema { row, .. } => row,
            other => panic!("expected schema error, got {other}"),
        }
    }

    proptest! {
        #[test]
        fn trajectory_round_trip(rows in prop::collection::vec(prop::collection::vec(0u16..=3, 5), 1..6), od in 0u32..9) {
            let t = ChoiceTrajectory::new(od, 3, rows).unwrap();
            let back = read_trajectories(&traj_bytes(std::slice::from_ref(&t))[..], "t.csv", |_| Some(3)).unwrap();
            prop_assert_eq!(back, vec![t]);
        }

        #[test]
        fn cost_round_trip(rows in prop::collection::vec(prop::collection::vec(0.0f64..1e3, 3), 1..10)) {
            let c = CostSequence::new(2, rows).unwrap();
            let mut buf = Vec::new();
            write_costs(&mut buf, std::slice::from_ref(&c)).unwrap();
            prop_assert_eq!(read_costs(&buf[..], "c.csv").unwrap(), vec![c]);
        }
    }

    #[test]
    fn count_round_trip_and_bad_total() {
        let costs = CostSequence::new(1, vec![vec![10.0, 12.0, 11.0]; 6]).unwrap();
        let traj = simulate_pooled(&Behavior::new(0.3, 0.5, 0.1).unwrap(), &[0.0; 3], &costs, 8, 3).unwrap();
        let counts = anonymize(&traj);
        let mut buf = Vec::new();
        write_counts(&mut buf, std::slice::from_ref(&counts)).unwrap();
        assert_eq!(read_counts(&buf[..], "o.csv", None).unwrap(), vec![counts.clone()]);

        let text = "od_id,day,route_id,count\n1,1,0,1\n1,1,1,2\n1,1,2,1\n1,2,0,1\n1,2,1,1\n1,2,2,1\n";
        let err = read_counts(text.as_bytes(), "o.csv", None).unwrap_err();
        assert!(err.to_string().contains("day 2"), "{err}");
        assert_eq!(row_of(err), 7);
    }

    #[test]
    fn padding_fills_non_travel() {
        let text = "od_id,day,route_id,count\n1,1,1,3\n1,1,2,4\n1,2,1,2\n1,2,2,1\n";
        let s = &read_counts(text.as_bytes(), "o.csv", Some(10)).unwrap()[0];
        assert_eq!(s.day(0), &[3, 3, 4]);
        assert_eq!(s.day(1), &[7, 2, 1]);
        assert!(read_counts(text.as_bytes(), "o.csv", Some(5)).is_err());
    }

    #[test]
    fn multi_od_costs_parse_into_separate_sequences() {
        let mut text = String::from("od_id,day,route_id,cost\n");
        for od in 0..3 {
            for day in 1..=4 {
                for r in 1..=2 + od {
                    text.push_str(&format!("{od},{day},{r},{}\n", 10 + day + r));
                }
            }
        }
        let seqs = read_costs(text.as_bytes(), "c.csv").unwrap();
        assert_eq!(seqs.len(), 3);
        for (od, s) in seqs.iter().enumerate() {
            assert_eq!((s.od_id as usize, s.days(), s.routes()), (od, 4, 2 + od));
        }
    }

    #[test]
    fn schema_violations_carry_line_numbers() {
        let gap = "od_id,commuter_id,day,choice\n1,1,1,0\n1,1,3,1\n";
        assert_eq!(
            row_of(read_trajectories(gap.as_bytes(), "t", |_| Some(2)).unwrap_err()),
            3
        );
        let bad_route = "od_id,commuter_id,day,choice\n1,1,1,0\n1,1,2,5\n";
        assert_eq!(
            row_of(read_trajectories(bad_route.as_bytes(), "t", |_| Some(2)).unwrap_err()),
            3
        );
        let dup = "od_id,commuter_id,day,choice\n1,1,1,0\n1,1,1,1\n";
        assert_eq!(
            row_of(read_trajectories(dup.as_bytes(), "t", |_| Some(2)).unwrap_err()),
            3
        );
        let bad_num = "od_id,day,route_id,cost\n1,1,1,x\n";
        assert_eq!(row_of(read_costs(bad_num.as_bytes(), "c").unwrap_err()), 2);
        let bad_header = "od,day,route,cost\n";
        assert_eq!(row_of(read_costs(bad_header.as_bytes(), "c").unwrap_err()), 1);
        let ragged = "od_id,day,route_id,cost\n1,1,1\n";
        assert_eq!(row_of(read_costs(ragged.as_bytes(), "c").unwrap_err()), 2);
        let route_zero = "od_id,day,route_id,cost\n1,1,0,3\n";
        assert_eq!(row_of(read_costs(route_zero.as_bytes(), "c").unwrap_err()), 2);
    }

    #[test]
    fn draws_round_trip() {
        let names = vec!["eta".to_string(), "theta".to_string()];
        let samples = vec![vec![0.1, 1.5], vec![0.2, 0.25], vec![1.0 / 3.0, 2.0], vec![0.4, 1e-17]];
        let d = PosteriorDraws::from_rows(names, vec![0, 0, 1, 1], vec![false, true, false, false], samples).unwrap();
        let mut buf = Vec::new();
        write_draws(&mut buf, &d).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("chain,draw,divergent,eta,theta\n1,1,0,"));
        let back = read_draws(&buf[..], "d.csv").unwrap();
        assert_eq!(
            (back.samples, back.chain_id, back.divergent, back.names),
            (d.samples, d.chain_id, d.divergent, d.names)
        );
        let skipped = "chain,draw,divergent,a\n1,1,0,0.5\n1,3,0,0.5\n";
        assert_eq!(row_of(read_draws(skipped.as_bytes(), "d").unwrap_err()), 3);
    }

    #[test]
    fn bands_round_trip() {
        let b = vec![PredictiveBand {
            day: 1,
            route_id: 0,
            mean: 1.25,
            lo50: 1.0,
            hi50: 2.0,
            lo95: 0.0,
            hi95: 3.0,
        }];
        let mut buf = Vec::new();
        write_bands(&mut buf, &b).unwrap();
        assert_eq!(read_bands(&buf[..], "b").unwrap(), b);
    }
}
