use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;

use super::EnergyDataset;
use crate::error::{Error, Result};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

#[derive(Clone, Debug)]
pub struct CsvPaths {
    pub readings: PathBuf,
    pub users: PathBuf,
    pub regions: PathBuf,
}

impl CsvPaths {
    /// `readings.csv`, `users.csv` and `regions.csv` inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        CsvPaths {
            readings: dir.join("readings.csv"),
            users: dir.join("users.csv"),
            regions: dir.join("regions.csv"),
        }
    }
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s.trim(), f).ok())
}

struct Table {
    file: String,
    columns: Vec<usize>,
    reader: csv::Reader<File>,
}

impl Table {
    fn open(path: &Path, required: &[&str]) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let file = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let headers = reader.headers()?.clone();
        let columns = required
            .iter()
            .map(|name| {
                headers.iter().position(|h| h == *name).ok_or_else(|| Error::Data {
                    file: file.clone(),
                    row: 1,
                    message: format!("missing column {name}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Table { file, columns, reader })
    }

    /// Yields `(line number, fields in required-column order)`.
    fn rows(&mut self) -> impl Iterator<Item = Result<(usize, Vec<String>)>> + '_ {
        let file = self.file.clone();
        let columns = self.columns.clone();
        self.reader.records().enumerate().map(move |(i, rec)| {
            let line = i + 2;
            let rec = rec?;
            let fields = columns
                .iter()
                .map(|&c| {
                    rec.get(c).map(str::to_string).ok_or_else(|| Error::Data {
                        file: file.clone(),
                        row: line,
                        message: "short row".into(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((line, fields))
        })
    }

    fn err(&self, row: usize, message: impl Into<String>) -> Error {
        Error::Data {
            file: self.file.clone(),
            row,
            message: message.into(),
        }
    }
}

fn number(t: &Table, row: usize, name: &str, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| t.err(row, format!("{name} is not a finite number: {s:?}")))
}

/// Loads and validates the three long-format CSV files.
pub fn load_csv(paths: &CsvPaths) -> Result<EnergyDataset> {
    let mut regions = Table::open(&paths.regions, &["region_id", "x", "y"])?;
    let mut region_ids = Vec::new();
    let mut region_coords = Vec::new();
    let mut region_index = HashMap::new();
    let rows: Vec<_> = regions.rows().collect();
    for row in rows {
        let (line, f) = row?;
        if region_index.insert(f[0].clone(), region_ids.len()).is_some() {
            return Err(regions.err(line, format!("duplicate region id {}", f[0])));
        }
        region_coords.push([number(&regions, line, "x", &f[1])?, number(&regions, line, "y", &f[2])?]);
        region_ids.push(f[0].clone());
    }

    let mut users = Table::open(&paths.users, &["user_id", "x", "y", "region_id"])?;
    let mut user_ids = Vec::new();
    let mut user_coords = Vec::new();
    let mut user_region = Vec::new();
    let mut user_index = HashMap::new();
    let rows: Vec<_> = users.rows().collect();
    for row in rows {
        let (line, f) = row?;
        let region = *region_index
            .get(&f[3])
            .ok_or_else(|| users.err(line, format!("unknown region id {}", f[3])))?;
        if user_index.insert(f[0].clone(), user_ids.len()).is_some() {
            return Err(users.err(line, format!("duplicate user id {}", f[0])));
        }
        user_coords.push([number(&users, line, "x", &f[1])?, number(&users, line, "y", &f[2])?]);
        user_region.push(region);
        user_ids.push(f[0].clone());
    }
    let n = user_ids.len();
    if n == 0 {
        return Err(users.err(1, "no users"));
    }

    let mut readings_t = Table::open(&paths.readings, &["timestamp", "user_id", "kwh"])?;
    let mut timestamps: Vec<NaiveDateTime> = Vec::new();
    let mut readings: Vec<f64> = Vec::new();
    let mut filled: Vec<bool> = Vec::new();
    let mut block_start_line = 0;
    let rows: Vec<_> = readings_t.rows().collect();
    let check_block = |t: &Table, filled: &[bool], line: usize| -> Result<()> {
        if let Some(missing) = filled.iter().position(|f| !f) {
            return Err(t.err(line, format!("timestamp block is missing user {}", user_ids[missing])));
        }
        Ok(())
    };
    for row in rows {
        let (line, f) = row?;
        let ts = parse_timestamp(&f[0]).ok_or_else(|| readings_t.err(line, format!("bad timestamp {:?}", f[0])))?;
        let user = *user_index
            .get(&f[1])
            .ok_or_else(|| readings_t.err(line, format!("unknown user id {}", f[1])))?;
        let kwh = number(&readings_t, line, "kwh", &f[2])?;
        if kwh < 0.0 {
            return Err(readings_t.err(line, format!("negative reading {kwh}")));
        }
        match timestamps.last() {
            Some(&last) if ts == last => {}
            Some(&last) if ts < last => {
                return Err(readings_t.err(line, format!("non-monotone timestamp {}", f[0])));
            }
            prev => {
                if prev.is_some() {
                    check_block(&readings_t, &filled[filled.len() - n..], block_start_line)?;
                }
                if timestamps.len() >= 2 {
                    let step = timestamps[1] - timestamps[0];
                    if ts - *timestamps.last().unwrap() != step {
                        return Err(readings_t.err(line, format!("gap or irregular interval before {}", f[0])));
                    }
                }
                timestamps.push(ts);
                readings.extend(std::iter::repeat_n(0.0, n));
                filled.extend(std::iter::repeat_n(false, n));
                block_start_line = line;
            }
        }
        let cell = (timestamps.len() - 1) * n + user;
        if filled[cell] {
            return Err(readings_t.err(line, format!("duplicated timestamp {} for user {}", f[0], f[1])));
        }
        filled[cell] = true;
        readings[cell] = kwh;
    }
    if timestamps.is_empty() {
        return Err(readings_t.err(1, "no readings"));
    }
    check_block(&readings_t, &filled[filled.len() - n..], block_start_line)?;

    let ds = EnergyDataset {
        timestamps,
        user_ids,
        user_coords,
        user_region,
        region_ids,
        region_coords,
        readings,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn write_csv(ds: &EnergyDataset, dir: &Path) -> Result<CsvPaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let paths = CsvPaths::in_dir(dir);

    let mut w = csv::Writer::from_path(&paths.regions)?;
    w.write_record(["region_id", "x", "y"])?;
    for (id, c) in ds.region_ids.iter().zip(&ds.region_coords) {
        w.write_record([id.clone(), c[0].to_string(), c[1].to_string()])?;
    }
    w.flush().map_err(|e| Error::io("writing regions.csv", e))?;

    let mut w = csv::Writer::from_path(&paths.users)?;
    w.write_record(["user_id", "x", "y", "region_id"])?;
    for i in 0..ds.users() {
        let c = ds.user_coords[i];
        w.write_record([
            ds.user_ids[i].clone(),
            c[0].to_string(),
            c[1].to_string(),
            ds.region_ids[ds.user_region[i]].clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("writing users.csv", e))?;

    let mut w = csv::Writer::from_path(&paths.readings)?;
    w.write_record(["timestamp", "user_id", "kwh"])?;
    for (t, ts) in ds.timestamps.iter().enumerate() {
        let stamp = ts.format(TIMESTAMP_FORMAT).to_string();
        for (i, id) in ds.user_ids.iter().enumerate() {
            w.write_record([stamp.as_str(), id.as_str(), &ds.reading(t, i).to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("writing readings.csv", e))?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn fixture(dir: &Path, readings: &str) -> CsvPaths {
        let paths = CsvPaths::in_dir(dir);
        std::fs::write(&paths.regions, "region_id,x,y\nR0,0,0\nR1,5,5\n").unwrap();
        std::fs::write(&paths.users, "user_id,x,y,region_id\nu1,0,0,R0\nu2,1,0,R0\nu3,5,4,R1\n").unwrap();
        let mut f = File::create(&paths.readings).unwrap();
        write!(f, "{readings}").unwrap();
        paths
    }

    const GOOD: &str = "timestamp,user_id,kwh\n\
        2018-01-01T00:00:00,u1,1.0\n2018-01-01T00:00:00,u2,2.0\n2018-01-01T00:00:00,u3,3.0\n\
        2018-01-01T00:30:00,u1,1.5\n2018-01-01T00:30:00,u3,3.5\n2018-01-01T00:30:00,u2,2.5\n";

    #[test]
    fn loads_well_formed_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_csv(&fixture(dir.path(), GOOD)).unwrap();
        assert_eq!(ds.users(), 3);
        assert_eq!(ds.steps(), 2);
        assert_eq!(ds.row(1), &[1.5, 2.5, 3.5]);
        assert_eq!(ds.user_region, vec![0, 0, 1]);
        assert_eq!(ds.steps_per_day().unwrap(), 48);
    }

    fn load_err(readings: &str) -> String {
        let dir = tempfile::tempdir().unwrap();
        load_csv(&fixture(dir.path(), readings)).unwrap_err().to_string()
    }

    #[test]
    fn duplicated_timestamp_names_row() {
        let bad = GOOD.to_string() + "2018-01-01T00:30:00,u1,9.0\n";
        let err = load_err(&bad);
        assert!(err.contains("row 8") && err.contains("duplicated"), "{err}");
    }

    #[test]
    fn negative_reading_names_row() {
        let bad = GOOD.replace("u2,2.5", "u2,-1.0");
        let err = load_err(&bad);
        assert!(err.contains("row 7") && err.contains("negative"), "{err}");
    }

    #[test]
    fn rejects_structural_problems() {
        assert!(load_err("timestamp,user_id\n").contains("missing column kwh"));
        let backwards = GOOD.to_string() + "2018-01-01T00:00:00,u1,1.0\n";
        assert!(load_err(&backwards).contains("non-monotone"));
        let gap = GOOD.to_string() + "2018-01-01T02:00:00,u1,1\n2018-01-01T02:00:00,u2,1\n2018-01-01T02:00:00,u3,1\n";
        assert!(load_err(&gap).contains("gap"));
        let missing = "timestamp,user_id,kwh\n2018-01-01T00:00:00,u1,1.0\n";
        assert!(load_err(missing).contains("missing user"));
        assert!(load_err(&GOOD.replace(",u3,3.5", ",u9,3.5")).contains("unknown user"));
    }

    #[test]
    fn unknown_region_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let paths = fixture(dir.path(), GOOD);
        std::fs::write(&paths.users, "user_id,x,y,region_id\nu1,0,0,R0\nu2,1,0,R7\n").unwrap();
        let err = load_csv(&paths).unwrap_err().to_string();
        assert!(err.contains("row 3") && err.contains("unknown region"), "{err}");
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_csv(&CsvPaths::in_dir(dir.path())).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }

    #[test]
    fn write_then_load_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_csv(&fixture(dir.path(), GOOD)).unwrap();
        let out = tempfile::tempdir().unwrap();
        let again = load_csv(&write_csv(&ds, out.path()).unwrap()).unwrap();
        assert_eq!(ds, again);
    }
}
