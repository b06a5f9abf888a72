use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use super::{GroundTruth, ImageId, Label, LabelTable};
use crate::error::{Error, Result};

/// Maximum number of index ids written per submission row.
pub const SUBMISSION_LIMIT: usize = 100;

const LABEL_HEADER: [&str; 2] = ["id", "landmark_id"];
const IMAGES_HEADER: [&str; 2] = ["id", "images"];

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelTable> {
    let path = path.as_ref();
    read_labels(File::open(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_labels<R: Read>(reader: R) -> Result<LabelTable> {
    let mut table = LabelTable::new();
    for_each_row(reader, LABEL_HEADER, |line, id, label| {
        let label = label.trim().parse::<u64>().map_err(|_| Error::Parse {
            line,
            message: format!("landmark_id {label:?} is not a non-negative integer"),
        })?;
        table.insert(parse_id(id, line)?, Label(label))
    })?;
    Ok(table)
}

pub fn save_labels(labels: &LabelTable, path: impl AsRef<Path>) -> Result<()> {
    save_with(path, |w| write_labels(labels, w))
}

pub fn write_labels<W: Write>(labels: &LabelTable, writer: &mut W) -> io::Result<()> {
    writeln!(writer, "id,landmark_id")?;
    for (id, label) in labels.iter() {
        writeln!(writer, "{id},{}", label.0)?;
    }
    Ok(())
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    read_ground_truth(File::open(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_ground_truth<R: Read>(reader: R) -> Result<GroundTruth> {
    let mut truth = GroundTruth::new();
    for_each_row(reader, IMAGES_HEADER, |line, id, images| {
        let relevant = parse_images(images, line)?.into_iter().collect::<BTreeSet<_>>();
        truth.insert(parse_id(id, line)?, relevant)
    })?;
    Ok(truth)
}

pub fn save_ground_truth(truth: &GroundTruth, path: impl AsRef<Path>) -> Result<()> {
    save_with(path, |w| write_ground_truth(truth, w))
}

pub fn write_ground_truth<W: Write>(truth: &GroundTruth, writer: &mut W) -> io::Result<()> {
    writeln!(writer, "id,images")?;
    for (query, relevant) in truth.iter() {
        write_row(writer, query, relevant.iter())?;
    }
    Ok(())
}

fn write_row<'a, W: Write>(writer: &mut W, query: &ImageId, ids: impl Iterator<Item = &'a ImageId>) -> io::Result<()> {
    write!(writer, "{query},")?;
    for (i, id) in ids.enumerate() {
        if i > 0 {
            writer.write_all(b" ")?;
        }
        writer.write_all(id.as_str().as_bytes())?;
    }
    writeln!(writer)
}

fn save_with<F>(path: impl AsRef<Path>, write: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> io::Result<()>,
{
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    write(&mut writer).map_err(|e| Error::io(path, e))?;
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Ranked index ids per query, in file order.
pub type Submission = Vec<(ImageId, Vec<ImageId>)>;

pub fn load_submission(path: impl AsRef<Path>) -> Result<Submission> {
    let path = path.as_ref();
    read_submission(File::open(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_submission<R: Read>(reader: R) -> Result<Submission> {
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for_each_row(reader, IMAGES_HEADER, |line, id, images| {
        let query = parse_id(id, line)?;
        if !seen.insert(query.clone()) {
            return Err(Error::validation(format!("query {query} appears more than once")));
        }
        let ranked = parse_images(images, line)?;
        let mut unique = BTreeSet::new();
        if let Some(dup) = ranked.iter().find(|id| !unique.insert(*id)) {
            return Err(Error::validation(format!("query {query} ranks {dup} twice")));
        }
        rows.push((query, ranked));
        Ok(())
    })?;
    Ok(rows)
}

pub fn save_submission<'a, I>(rows: I, path: impl AsRef<Path>) -> Result<()>
where
    I: IntoIterator<Item = (&'a ImageId, &'a [ImageId])>,
{
    save_with(path, |w| write_submission(rows, w))
}

/// Writes `id,images` rows, keeping at most [`SUBMISSION_LIMIT`] ids per query.
pub fn write_submission<'a, I, W>(rows: I, writer: &mut W) -> io::Result<()>
where
    I: IntoIterator<Item = (&'a ImageId, &'a [ImageId])>,
    W: Write,
{
    writeln!(writer, "id,images")?;
    for (query, ranked) in rows {
        write_row(writer, query, ranked.iter().take(SUBMISSION_LIMIT))?;
    }
    Ok(())
}

fn parse_id(token: &str, line: u64) -> Result<ImageId> {
    ImageId::new(token.trim()).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })
}

fn parse_images(field: &str, line: u64) -> Result<Vec<ImageId>> {
    field.split_whitespace().map(|t| parse_id(t, line)).collect()
}

fn for_each_row<R, F>(reader: R, header: [&str; 2], mut row: F) -> Result<()>
where
    R: Read,
    F: FnMut(u64, &str, &str) -> Result<()>,
{
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let found = csv.headers().map_err(|e| csv_error(e, 1))?.clone();
    if found.len() != 2 || found.iter().zip(header).any(|(a, b)| a.trim() != b) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {:?}, found {:?}", header.join(","), found.iter().collect::<Vec<_>>().join(",")),
        });
    }
    for record in csv.records() {
        let record = record.map_err(|e| csv_error(e, 0))?;
        let line = record.position().map_or(0, |p| p.line());
        row(line, &record[0], &record[1])?;
    }
    Ok(())
}

fn csv_error(err: csv::Error, fallback_line: u64) -> Error {
    let line = err.position().map_or(fallback_line, |p| p.line());
    Error::Parse {
        line,
        message: err.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_parse() {
        let table = read_labels("id,landmark_id\na,5\nb,5\nc,9\n".as_bytes()).unwrap();
        assert_eq!(table.label_count(), 2);
        assert_eq!(table.get("a"), Some(Label(5)));
        assert_eq!(table.get("b"), Some(Label(5)));
        assert_eq!(table.get("c"), Some(Label(9)));
    }

    #[test]
    fn empty_label_body() {
        let table = read_labels("id,landmark_id\n".as_bytes()).unwrap();
        assert!(table.is_empty());
        assert_eq!(table.label_count(), 0);
    }

    #[test]
    fn duplicate_label_row() {
        let err = read_labels("id,landmark_id\na,5\na,5\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn malformed_rows_report_line() {
        let err = read_labels("id,landmark_id\na,5\nb,x\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = read_labels("id,landmark_id\na,5\nb,1,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = read_labels("image,label\na,5\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn ground_truth_parse() {
        let gt = read_ground_truth("id,images\nq1,a b c\nq2,\n".as_bytes()).unwrap();
        assert_eq!(gt.len(), 2);
        assert_eq!(gt.get("q1").unwrap().len(), 3);
        assert!(gt.get("q2").unwrap().is_empty());
        assert!(read_ground_truth("id,images\nq1,a\nq1,b\n".as_bytes()).is_err());
    }

    #[test]
    fn submission_truncates_to_limit() {
        let q = ImageId::new("q").unwrap();
        let ranked: Vec<ImageId> = (0..150).map(|i| ImageId::new(format!("i{i}")).unwrap()).collect();
        let mut buf = Vec::new();
        write_submission([(&q, ranked.as_slice())], &mut buf).unwrap();
        let back = read_submission(&buf[..]).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].1.len(), SUBMISSION_LIMIT);
        assert_eq!(back[0].1[..], ranked[..SUBMISSION_LIMIT]);
    }

    #[test]
    fn submission_rejects_repeated_ids() {
        assert!(read_submission("id,images\nq,a b a\n".as_bytes()).is_err());
    }
}
