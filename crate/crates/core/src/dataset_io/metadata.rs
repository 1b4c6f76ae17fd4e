//! Parquet metadata table, written through the low-level column API.

use std::fs::File;
use std::path::Path;
use std::sync::Arc;

use parquet::data_type::{ByteArray, ByteArrayType, DoubleType, Int32Type, Int64Type};
use parquet::file::properties::WriterProperties;
use parquet::file::reader::{FileReader, SerializedFileReader};
use parquet::file::writer::SerializedFileWriter;
use parquet::record::RowAccessor;
use parquet::schema::parser::parse_message_type;

use super::{DatasetError, SampleRecord};
use crate::langid::BucketKind;

pub const METADATA_COLUMNS: [&str; 10] = [
    "id",
    "url",
    "text",
    "width",
    "height",
    "similarity",
    "nsfw_probability",
    "watermark_probability",
    "language_bucket",
    "language_code",
];

const SCHEMA: &str = "
message sample_record {
    REQUIRED INT64 id (INTEGER(64, false));
    REQUIRED BYTE_ARRAY url (UTF8);
    REQUIRED BYTE_ARRAY text (UTF8);
    REQUIRED INT32 width (INTEGER(32, false));
    REQUIRED INT32 height (INTEGER(32, false));
    REQUIRED DOUBLE similarity;
    REQUIRED DOUBLE nsfw_probability;
    REQUIRED DOUBLE watermark_probability;
    REQUIRED BYTE_ARRAY language_bucket (UTF8);
    REQUIRED BYTE_ARRAY language_code (UTF8);
}
";

const ROW_GROUP_SIZE: usize = 65_536;

/// Validates every record, then writes one row per record. An empty slice
/// yields a valid file with zero rows.
pub fn write_metadata(records: &[SampleRecord], path: &Path) -> Result<(), DatasetError> {
    let mut ids = std::collections::HashSet::with_capacity(records.len());
    for r in records {
        r.validate()?;
        if !ids.insert(r.id) {
            return Err(DatasetError::InvariantViolation { id: r.id, reason: "duplicate id".into() });
        }
    }
    let schema = Arc::new(parse_message_type(SCHEMA)?);
    let props = Arc::new(
        WriterProperties::builder()
            .set_created_by("crawlcurate".to_string())
            .build(),
    );
    let file = File::create(path)?;
    let mut writer = SerializedFileWriter::new(file, schema, props)?;
    for group in records.chunks(ROW_GROUP_SIZE) {
        let mut rg = writer.next_row_group()?;
        let mut column = 0;
        while let Some(mut col) = rg.next_column()? {
            let strings = |f: fn(&SampleRecord) -> &str| -> Vec<ByteArray> {
                group.iter().map(|r| ByteArray::from(f(r))).collect()
            };
            match column {
                0 => {
                    let v: Vec<i64> = group.iter().map(|r| r.id as i64).collect();
                    col.typed::<Int64Type>().write_batch(&v, None, None)?;
                }
                1 => {
                    col.typed::<ByteArrayType>().write_batch(&strings(|r| &r.url), None, None)?;
                }
                2 => {
                    col.typed::<ByteArrayType>().write_batch(&strings(|r| &r.text), None, None)?;
                }
                3 | 4 => {
                    let v: Vec<i32> = group
                        .iter()
                        .map(|r| (if column == 3 { r.width } else { r.height }) as i32)
                        .collect();
                    col.typed::<Int32Type>().write_batch(&v, None, None)?;
                }
                5..=7 => {
                    let v: Vec<f64> = group
                        .iter()
                        .map(|r| match column {
                            5 => r.similarity,
                            6 => r.nsfw_probability,
                            _ => r.watermark_probability,
                        })
                        .collect();
                    col.typed::<DoubleType>().write_batch(&v, None, None)?;
                }
                8 => {
                    col.typed::<ByteArrayType>()
                        .write_batch(&strings(|r| r.language_bucket.as_str()), None, None)?;
                }
                9 => {
                    col.typed::<ByteArrayType>()
                        .write_batch(&strings(|r| &r.language_code), None, None)?;
                }
                _ => unreachable!("schema has ten columns"),
            }
            col.close()?;
            column += 1;
        }
        rg.close()?;
    }
    writer.close()?;
    Ok(())
}

pub fn read_metadata(path: &Path) -> Result<Vec<SampleRecord>, DatasetError> {
    let reader = SerializedFileReader::new(File::open(path)?)?;
    let columns: Vec<String> = reader
        .metadata()
        .file_metadata()
        .schema_descr()
        .columns()
        .iter()
        .map(|c| c.name().to_string())
        .collect();
    if columns != METADATA_COLUMNS {
        return Err(DatasetError::Malformed(format!("unexpected columns {columns:?}")));
    }
    let mut out = Vec::with_capacity(reader.metadata().file_metadata().num_rows() as usize);
    for row in reader.get_row_iter(None)? {
        let row = row?;
        let bucket = row.get_string(8)?;
        let record = SampleRecord {
            id: row.get_ulong(0)?,
            url: row.get_string(1)?.clone(),
            text: row.get_string(2)?.clone(),
            width: row.get_uint(3)?,
            height: row.get_uint(4)?,
            similarity: row.get_double(5)?,
            nsfw_probability: row.get_double(6)?,
            watermark_probability: row.get_double(7)?,
            language_bucket: BucketKind::parse(bucket)
                .ok_or_else(|| DatasetError::Malformed(format!("unknown bucket {bucket:?}")))?,
            language_code: row.get_string(9)?.clone(),
        };
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset_io::testutil::record;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.parquet");
        let mut records: Vec<_> = (0..100).map(record).collect();
        records[3].id = u64::MAX;
        records[4].text = "ünïcödé 猫 \"quoted\"".into();
        records[5].language_bucket = BucketKind::NoLanguage;
        records[5].language_code = "und".into();
        write_metadata(&records, &path).unwrap();
        assert_eq!(read_metadata(&path).unwrap(), records);
    }

    #[test]
    fn empty_file_has_zero_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.parquet");
        write_metadata(&[], &path).unwrap();
        assert!(read_metadata(&path).unwrap().is_empty());
    }

    #[test]
    fn rejects_invalid_rows_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.parquet");
        let mut r = record(1);
        r.width = 0;
        assert!(matches!(
            write_metadata(&[record(0), r], &path),
            Err(DatasetError::InvariantViolation { id: 1, .. })
        ));
        assert!(!path.exists());
        assert!(matches!(
            write_metadata(&[record(2), record(2)], &path),
            Err(DatasetError::InvariantViolation { id: 2, .. })
        ));
    }

    #[test]
    fn deterministic_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let records: Vec<_> = (0..10).map(record).collect();
        write_metadata(&records, &a).unwrap();
        write_metadata(&records, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
