//! Artifact files: JSON documents and CSV tables.
//!
//! Every float is written with 17 significant digits so that a value read
//! back is bit-identical to the one written. Lines end in `\n`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::ser::{CompactFormatter, Formatter, PrettyFormatter};

use crate::domain::{trait_from_initial, CoefficientMatrix, DominantOrder, TraitVector, N_TRAITS, TRAIT_INITIALS};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rnn::{Trajectory, HIDDEN};
use crate::segmentation::StabilityReport;
use crate::surrogate::DirectionAngles;
use crate::synth::RawTransaction;

/// `x` in scientific notation with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

/// Wraps a serde_json formatter so floats use [`fmt_f64`].
struct Digits17<F>(F);

macro_rules! delegate {
    ($($name:ident($($arg:ident: $ty:ty),*);)*) => {
        $(
            fn $name<W: ?Sized + Write>(&mut self, w: &mut W $(, $arg: $ty)*) -> io::Result<()> {
                self.0.$name(w $(, $arg)*)
            }
        )*
    };
}

impl<F: Formatter> Formatter for Digits17<F> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        w.write_all(fmt_f64(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }

    delegate! {
        begin_array();
        end_array();
        begin_array_value(first: bool);
        end_array_value();
        begin_object();
        end_object();
        begin_object_key(first: bool);
        end_object_key();
        begin_object_value();
        end_object_value();
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => Error::StageOrder(path.display().to_string()),
        _ => Error::io(path, e),
    })
}

/// Indented JSON with a trailing newline.
pub fn to_json_string<V: Serialize + ?Sized>(value: &V) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Digits17(PrettyFormatter::with_indent(b"  ")));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

pub fn write_json<V: Serialize + ?Sized>(path: impl AsRef<Path>, value: &V) -> Result<()> {
    let path = path.as_ref();
    let text = to_json_string(value)?;
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Single-line JSON for large documents.
pub fn write_json_compact<V: Serialize + ?Sized>(path: impl AsRef<Path>, value: &V) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let mut ser = serde_json::Serializer::with_formatter(&mut w, Digits17(CompactFormatter));
    value.serialize(&mut ser)?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_json<V: DeserializeOwned>(path: impl AsRef<Path>) -> Result<V> {
    let path = path.as_ref();
    Ok(serde_json::from_reader(open(path)?)?)
}

fn write_table(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(create(path)?);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Records of a CSV file whose header must equal `header`.
fn read_table(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::ReaderBuilder::new().from_reader(open(path)?);
    let found = r.headers()?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::Schema(format!(
            "{}: header {:?}, expected {:?}",
            path.display(),
            found.iter().collect::<Vec<_>>(),
            header
        )));
    }
    Ok(r.records().collect::<std::result::Result<_, _>>()?)
}

fn field<'r>(path: &Path, rec: &'r csv::StringRecord, i: usize) -> Result<&'r str> {
    rec.get(i).ok_or_else(|| {
        Error::Schema(format!("{}: line {} has no column {i}", path.display(), line(rec)))
    })
}

fn line(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn parse<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<T> {
    let s = field(path, rec, i)?;
    s.parse().map_err(|_| {
        Error::Schema(format!("{}: line {}: cannot parse {s:?} in column {i}", path.display(), line(rec)))
    })
}

fn parse_order(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<DominantOrder> {
    let s = field(path, rec, i)?;
    s.parse()
        .map_err(|e| Error::Schema(format!("{}: line {}: {e}", path.display(), line(rec))))
}

const COEFFICIENT_HEADER: [&str; 7] = [
    "class_id",
    "class_name",
    "openness",
    "conscientiousness",
    "extraversion",
    "agreeableness",
    "neuroticism",
];

const TRAITS_HEADER: [&str; 7] = [
    "customer_id",
    "openness",
    "conscientiousness",
    "extraversion",
    "agreeableness",
    "neuroticism",
    "dominant_order",
];

pub fn write_coefficients_csv(path: impl AsRef<Path>, coeffs: &CoefficientMatrix<f64>) -> Result<()> {
    let rows = (0..coeffs.n_classes()).map(|k| {
        let mut row = vec![k.to_string(), coeffs.class_names()[k].clone()];
        row.extend(coeffs.values().row(k).iter().map(|&v| fmt_f64(v)));
        row
    });
    write_table(path.as_ref(), &COEFFICIENT_HEADER, rows)
}

pub fn read_coefficients_csv(path: impl AsRef<Path>) -> Result<CoefficientMatrix<f64>> {
    let path = path.as_ref();
    let records = read_table(path, &COEFFICIENT_HEADER)?;
    let mut names = Vec::with_capacity(records.len());
    let mut values = Vec::with_capacity(records.len() * N_TRAITS);
    for (k, rec) in records.iter().enumerate() {
        let id: usize = parse(path, rec, 0)?;
        if id != k {
            return Err(Error::Schema(format!(
                "{}: line {}: class_id {id}, expected {k}",
                path.display(),
                line(rec)
            )));
        }
        names.push(field(path, rec, 1)?.to_string());
        for t in 0..N_TRAITS {
            values.push(parse::<f64>(path, rec, 2 + t)?);
        }
    }
    if names.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no classes", path.display())));
    }
    CoefficientMatrix::new(names, Matrix::from_vec(records.len(), N_TRAITS, values)?)
}

/// One row of `traits.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraitRow {
    pub customer_id: String,
    pub traits: TraitVector<f64>,
    pub order: DominantOrder,
}

pub fn write_traits_csv(path: impl AsRef<Path>, rows: &[TraitRow]) -> Result<()> {
    let rows = rows.iter().map(|r| {
        let mut row = vec![r.customer_id.clone()];
        row.extend(r.traits.grades.iter().map(|&g| fmt_f64(g)));
        row.push(r.order.to_string());
        row
    });
    write_table(path.as_ref(), &TRAITS_HEADER, rows)
}

pub fn read_traits_csv(path: impl AsRef<Path>) -> Result<Vec<TraitRow>> {
    let path = path.as_ref();
    read_table(path, &TRAITS_HEADER)?
        .iter()
        .map(|rec| {
            let mut grades = [0.0; N_TRAITS];
            for (t, g) in grades.iter_mut().enumerate() {
                *g = parse(path, rec, 1 + t)?;
            }
            Ok(TraitRow {
                customer_id: field(path, rec, 0)?.to_string(),
                traits: TraitVector { grades },
                order: parse_order(path, rec, 1 + N_TRAITS)?,
            })
        })
        .collect()
}

const TRANSACTION_HEADER: [&str; 4] = ["customer_id", "bucket", "class_id", "amount"];

pub fn write_transactions_csv(path: impl AsRef<Path>, rows: &[RawTransaction]) -> Result<()> {
    let rows = rows.iter().map(|r| {
        vec![
            r.customer_id.clone(),
            r.bucket.to_string(),
            r.class_id.to_string(),
            fmt_f64(r.amount),
        ]
    });
    write_table(path.as_ref(), &TRANSACTION_HEADER, rows)
}

pub fn read_transactions_csv(path: impl AsRef<Path>) -> Result<Vec<RawTransaction>> {
    let path = path.as_ref();
    read_table(path, &TRANSACTION_HEADER)?
        .iter()
        .map(|rec| {
            Ok(RawTransaction {
                customer_id: field(path, rec, 0)?.to_string(),
                bucket: parse(path, rec, 1)?,
                class_id: parse(path, rec, 2)?,
                amount: parse(path, rec, 3)?,
            })
        })
        .collect()
}

const TRAJECTORY_HEADER: [&str; 5] = ["customer_id", "step", "h1", "h2", "h3"];

pub fn write_trajectories_csv(path: impl AsRef<Path>, trajectories: &[Trajectory<f64>]) -> Result<()> {
    let rows = trajectories.iter().flat_map(|t| {
        t.points.iter().enumerate().map(move |(step, h)| {
            let mut row = vec![t.customer_id.clone(), step.to_string()];
            row.extend(h.iter().map(|&v| fmt_f64(v)));
            row
        })
    });
    write_table(path.as_ref(), &TRAJECTORY_HEADER, rows)
}

/// Trajectories in file order; rows of one customer must be contiguous with steps `0, 1, ...`.
pub fn read_trajectories_csv(path: impl AsRef<Path>) -> Result<Vec<Trajectory<f64>>> {
    let path = path.as_ref();
    let mut out: Vec<Trajectory<f64>> = Vec::new();
    for rec in read_table(path, &TRAJECTORY_HEADER)? {
        let id = field(path, &rec, 0)?;
        let step: usize = parse(path, &rec, 1)?;
        let mut h = [0.0; HIDDEN];
        for (j, v) in h.iter_mut().enumerate() {
            *v = parse(path, &rec, 2 + j)?;
        }
        match out.last_mut() {
            Some(t) if t.customer_id == id && t.points.len() == step => t.points.push(h),
            _ if step == 0 => out.push(Trajectory {
                customer_id: id.to_string(),
                points: vec![h],
            }),
            _ => {
                return Err(Error::Schema(format!(
                    "{}: line {}: step {step} of {id} is out of sequence",
                    path.display(),
                    line(&rec)
                )))
            }
        }
    }
    Ok(out)
}

/// One row of `angles.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleRow {
    pub customer_id: String,
    pub angles: DirectionAngles<f64>,
    pub order: DominantOrder,
}

const ANGLE_HEADER: [&str; 4] = ["customer_id", "theta", "phi", "dominant_order"];

pub fn write_angles_csv(path: impl AsRef<Path>, rows: &[AngleRow]) -> Result<()> {
    let rows = rows.iter().map(|r| {
        vec![
            r.customer_id.clone(),
            fmt_f64(r.angles.theta),
            fmt_f64(r.angles.phi),
            r.order.to_string(),
        ]
    });
    write_table(path.as_ref(), &ANGLE_HEADER, rows)
}

pub fn read_angles_csv(path: impl AsRef<Path>) -> Result<Vec<AngleRow>> {
    let path = path.as_ref();
    read_table(path, &ANGLE_HEADER)?
        .iter()
        .map(|rec| {
            Ok(AngleRow {
                customer_id: field(path, rec, 0)?.to_string(),
                angles: DirectionAngles {
                    theta: parse(path, rec, 1)?,
                    phi: parse(path, rec, 2)?,
                },
                order: parse_order(path, rec, 3)?,
            })
        })
        .collect()
}

const STABILITY_HEADER: [&str; 4] = ["customer_id", "coarse_cluster", "fine_cluster", "divergence_rad"];

/// Clusters are written as the dominant trait's initial.
pub fn write_stability_csv(path: impl AsRef<Path>, report: &StabilityReport) -> Result<()> {
    let rows = report.entries.iter().map(|e| {
        vec![
            e.customer_id.clone(),
            TRAIT_INITIALS[e.coarse_cluster].to_string(),
            TRAIT_INITIALS[e.fine_cluster].to_string(),
            fmt_f64(e.divergence_rad),
        ]
    });
    write_table(path.as_ref(), &STABILITY_HEADER, rows)
}

/// `(customer_id, coarse_cluster, fine_cluster, divergence_rad)` rows.
pub fn read_stability_csv(path: impl AsRef<Path>) -> Result<Vec<(String, usize, usize, f64)>> {
    let path = path.as_ref();
    let cluster = |rec: &csv::StringRecord, i: usize| -> Result<usize> {
        let s = field(path, rec, i)?;
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => trait_from_initial(c),
            _ => Err(Error::Schema(format!("{}: bad cluster {s:?}", path.display()))),
        }
    };
    read_table(path, &STABILITY_HEADER)?
        .iter()
        .map(|rec| {
            Ok((
                field(path, rec, 0)?.to_string(),
                cluster(rec, 1)?,
                cluster(rec, 2)?,
                parse(path, rec, 3)?,
            ))
        })
        .collect()
}

/// Writes an arbitrary table; used for plot exports.
pub fn write_csv(path: impl AsRef<Path>, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    write_table(path.as_ref(), header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0, f64::MIN_POSITIVE, f64::MAX] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
            let mantissa = s.split('e').next().unwrap();
            assert_eq!(mantissa.chars().filter(char::is_ascii_digit).count(), 17, "{s}");
        }
    }

    #[test]
    fn json_uses_the_fixed_float_format() {
        let s = to_json_string(&serde_json::json!({"a": 0.1, "b": [1.5, 2], "c": null})).unwrap();
        assert!(s.contains("1.0000000000000001e-1"), "{s}");
        assert!(s.contains("1.5000000000000000e0"), "{s}");
        assert!(s.ends_with("}\n"));
        let back: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["a"].as_f64(), Some(0.1));
        assert_eq!(back["b"][1].as_u64(), Some(2));
    }

    #[test]
    fn non_finite_floats_become_null() {
        let s = to_json_string(&[f64::NEG_INFINITY]).unwrap();
        assert!(s.contains("null"));
    }

    #[test]
    fn coefficient_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("coefficients.csv");
        let values = Matrix::from_fn(3, N_TRAITS, |r, c| (r as f64 - 1.0) * 0.1 + c as f64 / 7.0);
        let names = vec!["a".to_string(), "b, with comma".to_string(), "c".to_string()];
        let coeffs = CoefficientMatrix::new(names, values).unwrap();
        write_coefficients_csv(&path, &coeffs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("class_id,class_name,openness,conscientiousness,extraversion,agreeableness,neuroticism\n"));
        assert!(!text.contains('\r'));
        assert_eq!(read_coefficients_csv(&path).unwrap(), coeffs);
    }

    #[test]
    fn wrong_header_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("angles.csv");
        std::fs::write(&path, "customer_id,phi,theta,dominant_order\n").unwrap();
        assert!(matches!(read_angles_csv(&path), Err(Error::Schema(_))));
    }

    #[test]
    fn missing_file_is_a_stage_order_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_json::<serde_json::Value>(dir.path().join("model.json")), Err(Error::StageOrder(_))));
    }

    #[test]
    fn trajectory_rows_must_be_in_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trajectories.csv");
        std::fs::write(&path, "customer_id,step,h1,h2,h3\nc0,0,0,0,0\nc0,2,1,1,1\n").unwrap();
        assert!(matches!(read_trajectories_csv(&path), Err(Error::Schema(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn fmt_f64_is_lossless(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
            prop_assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }

        #[test]
        fn json_floats_round_trip(v in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 1..20)) {
            let back: Vec<f64> = serde_json::from_str(&to_json_string(&v).unwrap()).unwrap();
            prop_assert_eq!(back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), v.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }

        #[test]
        fn trajectories_round_trip(points in prop::collection::vec(prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..5), 1..4)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("t.csv");
            let trajs: Vec<Trajectory<f64>> = points
                .into_iter()
                .enumerate()
                .map(|(i, p)| Trajectory { customer_id: format!("c{i}"), points: p })
                .collect();
            write_trajectories_csv(&path, &trajs).unwrap();
            prop_assert_eq!(read_trajectories_csv(&path).unwrap(), trajs);
        }

        #[test]
        fn angles_and_traits_round_trip(theta in -3.0f64..3.0, phi in -1.5f64..1.5, g in prop::array::uniform5(0.0f64..1.0), perm in Just([4usize, 1, 0, 3, 2])) {
            let dir = tempfile::tempdir().unwrap();
            let order = DominantOrder::from_order(perm).unwrap();
            let a = vec![AngleRow { customer_id: "x".into(), angles: DirectionAngles { theta, phi }, order }];
            write_angles_csv(dir.path().join("a.csv"), &a).unwrap();
            prop_assert_eq!(read_angles_csv(dir.path().join("a.csv")).unwrap(), a);
            let t = vec![TraitRow { customer_id: "x".into(), traits: TraitVector { grades: g }, order }];
            write_traits_csv(dir.path().join("t.csv"), &t).unwrap();
            prop_assert_eq!(read_traits_csv(dir.path().join("t.csv")).unwrap(), t);
        }
    }
}
