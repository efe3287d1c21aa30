//! Plasmid record ingest and validation.
//!
//! A record is a DNA sequence over `{A, C, G, T, N}` plus 39 binary
//! phenotype flags (growth strain, growth temperature, copy number, host
//! species, bacterial resistance, other selectable markers) and an opaque
//! lab id. Records arrive either as one CSV file or as FASTA with a sidecar
//! CSV carrying labels and metadata keyed by sequence id.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};

/// Canonical metadata columns, in on-disk order.
/// 8 growth-strain + 3 growth-temperature + 3 copy-number + 10 host-species
/// + 5 bacterial-resistance + 10 other-selectable-marker flags.
pub const METADATA_COLUMNS: [&str; 39] = [
    "growth_strain_ccdb_survival",
    "growth_strain_dh10b",
    "growth_strain_dh5alpha",
    "growth_strain_neb_stable",
    "growth_strain_other",
    "growth_strain_stbl3",
    "growth_strain_top10",
    "growth_strain_xl1_blue",
    "growth_temp_30",
    "growth_temp_37",
    "growth_temp_other",
    "copy_number_high_copy",
    "copy_number_low_copy",
    "copy_number_unknown",
    "species_budding_yeast",
    "species_fly",
    "species_human",
    "species_mouse",
    "species_mustard_weed",
    "species_nematode",
    "species_other",
    "species_rat",
    "species_synthetic",
    "species_zebrafish",
    "bacterial_resistance_ampicillin",
    "bacterial_resistance_chloramphenicol",
    "bacterial_resistance_kanamycin",
    "bacterial_resistance_other",
    "bacterial_resistance_spectinomycin",
    "selectable_markers_blasticidin",
    "selectable_markers_his3",
    "selectable_markers_hygromycin",
    "selectable_markers_leu2",
    "selectable_markers_neomycin",
    "selectable_markers_other",
    "selectable_markers_puromycin",
    "selectable_markers_trp1",
    "selectable_markers_ura3",
    "selectable_markers_zeocin",
];

pub const METADATA_DIM: usize = METADATA_COLUMNS.len();

/// Auxiliary class aggregating labs with too few records.
pub const AUXILIARY_LAB: &str = "Unknown Engineered";

const SEQUENCE_ALPHABET: [char; 5] = ['A', 'C', 'G', 'T', 'N'];

/// One validated plasmid: uppercase sequence, 39 flags, lab label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlasmidRecord {
    pub sequence_id: String,
    pub lab_id: String,
    pub sequence: String,
    pub metadata: [u8; METADATA_DIM],
    /// True when the input pre-assigned this record to the held-out test
    /// set (optional `split` column).
    pub held_out_test: bool,
}

/// The 39 phenotype flags in canonical column order.
pub fn encode_metadata(record: &PlasmidRecord) -> [u8; METADATA_DIM] {
    record.metadata
}

/// Ordered lab list with a dense index. The auxiliary class always occupies
/// the last index; all other labs appear in first-appearance order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabCatalog {
    labs: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabCatalog {
    pub fn from_records(records: &[PlasmidRecord]) -> Self {
        let mut labs: Vec<String> = Vec::new();
        let mut seen: HashSet<&str> = HashSet::new();
        for r in records {
            if r.lab_id != AUXILIARY_LAB && seen.insert(&r.lab_id) {
                labs.push(r.lab_id.clone());
            }
        }
        labs.push(AUXILIARY_LAB.to_string());
        let index = labs
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        Self { labs, index }
    }

    pub fn from_labs(labs: Vec<String>) -> Result<Self> {
        let aux_count = labs.iter().filter(|l| *l == AUXILIARY_LAB).count();
        if aux_count != 1 || labs.last().map(String::as_str) != Some(AUXILIARY_LAB) {
            return Err(Error::InvalidInput(
                "lab catalog must contain the auxiliary class exactly once, in last place".into(),
            ));
        }
        let index: HashMap<String, usize> = labs
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        if index.len() != labs.len() {
            return Err(Error::InvalidInput("duplicate lab in catalog".into()));
        }
        Ok(Self { labs, index })
    }

    pub fn len(&self) -> usize {
        self.labs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labs.is_empty()
    }

    pub fn labs(&self) -> &[String] {
        &self.labs
    }

    pub fn lab(&self, index: usize) -> &str {
        &self.labs[index]
    }

    pub fn index_of(&self, lab: &str) -> Option<usize> {
        self.index.get(lab).copied()
    }

    pub fn auxiliary_index(&self) -> usize {
        self.labs.len() - 1
    }
}

/// A row that failed validation, with its 1-based line number.
#[derive(Clone, Debug)]
pub struct Rejection {
    pub line: u64,
    pub sequence_id: String,
    pub reason: String,
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "line {}: record {:?} rejected: {}",
            self.line, self.sequence_id, self.reason
        )
    }
}

#[derive(Clone, Debug)]
pub struct ParsedDataset {
    pub records: Vec<PlasmidRecord>,
    pub catalog: LabCatalog,
    pub rejections: Vec<Rejection>,
}

pub enum DatasetFormat<'a> {
    Csv,
    /// FASTA sequences plus a sidecar CSV (`sequence_id,lab_id,<flags>`)
    /// carrying labels and metadata.
    FastaWithSidecar { sidecar: &'a Path },
}

pub fn parse_dataset(path: &Path, format: DatasetFormat<'_>) -> Result<ParsedDataset> {
    match format {
        DatasetFormat::Csv => parse_csv_dataset(path),
        DatasetFormat::FastaWithSidecar { sidecar } => parse_fasta_dataset(path, sidecar),
    }
}

fn validate_sequence(raw: &str) -> std::result::Result<String, String> {
    if raw.is_empty() {
        return Err("empty sequence".into());
    }
    let mut out = String::with_capacity(raw.len());
    for c in raw.chars() {
        let up = c.to_ascii_uppercase();
        if SEQUENCE_ALPHABET.contains(&up) {
            out.push(up);
        } else {
            return Err(format!("character {c:?} outside alphabet ACGTN"));
        }
    }
    Ok(out)
}

fn parse_flag(raw: &str, column: &str) -> std::result::Result<u8, String> {
    match raw.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(format!("{column} must be 0 or 1, got {other:?}")),
    }
}

fn parse_split_tag(raw: &str) -> std::result::Result<bool, String> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "" => Ok(false),
        "test" => Ok(true),
        other => Err(format!("split column must be empty or \"test\", got {other:?}")),
    }
}

/// Checks a header against `sequence_id,lab_id[,sequence],<39 flags>[,split]`.
/// Returns whether the optional trailing split column is present.
fn check_header(headers: &csv::StringRecord, with_sequence: bool, path: &Path) -> Result<bool> {
    let mut expected: Vec<&str> = if with_sequence {
        vec!["sequence_id", "lab_id", "sequence"]
    } else {
        vec!["sequence_id", "lab_id"]
    };
    expected.extend(METADATA_COLUMNS);
    let got: Vec<&str> = headers.iter().collect();
    let has_split = got.len() == expected.len() + 1 && got.last() == Some(&"split");
    let body = if has_split { &got[..got.len() - 1] } else { &got[..] };
    if body != expected.as_slice() {
        for (i, want) in expected.iter().enumerate() {
            if body.get(i) != Some(want) {
                return Err(Error::Dataset(format!(
                    "{}: column {} must be {:?}, got {:?}",
                    path.display(),
                    i + 1,
                    want,
                    body.get(i).copied().unwrap_or("<missing>")
                )));
            }
        }
        return Err(Error::Dataset(format!(
            "{}: unexpected extra columns",
            path.display()
        )));
    }
    Ok(has_split)
}

fn parse_csv_dataset(path: &Path) -> Result<ParsedDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let has_split = check_header(reader.headers().map_err(csv_err)?, true, path)?;

    let mut records = Vec::new();
    let mut rejections = Vec::new();
    let mut seen_ids: HashSet<String> = HashSet::new();
    for (row_idx, row) in reader.records().enumerate() {
        let row = row.map_err(csv_err)?;
        let line = row
            .position()
            .map(|p| p.line())
            .unwrap_or(row_idx as u64 + 2);
        let sequence_id = row.get(0).unwrap_or("").to_string();
        if sequence_id.is_empty() {
            return Err(Error::Dataset(format!("line {line}: empty sequence_id")));
        }
        if !seen_ids.insert(sequence_id.clone()) {
            return Err(Error::Dataset(format!(
                "line {line}: duplicate sequence_id {sequence_id:?}"
            )));
        }
        let lab_id = row.get(1).unwrap_or("").to_string();
        let reject = |reason: String, rejections: &mut Vec<Rejection>| {
            rejections.push(Rejection {
                line,
                sequence_id: sequence_id.clone(),
                reason,
            });
        };
        let sequence = match validate_sequence(row.get(2).unwrap_or("")) {
            Ok(s) => s,
            Err(reason) => {
                reject(reason, &mut rejections);
                continue;
            }
        };
        let mut metadata = [0u8; METADATA_DIM];
        let mut flag_err = None;
        for (i, col) in METADATA_COLUMNS.iter().enumerate() {
            match parse_flag(row.get(3 + i).unwrap_or(""), col) {
                Ok(f) => metadata[i] = f,
                Err(reason) => {
                    flag_err = Some(reason);
                    break;
                }
            }
        }
        if let Some(reason) = flag_err {
            reject(reason, &mut rejections);
            continue;
        }
        let held_out_test = if has_split {
            match parse_split_tag(row.get(3 + METADATA_DIM).unwrap_or("")) {
                Ok(t) => t,
                Err(reason) => {
                    reject(reason, &mut rejections);
                    continue;
                }
            }
        } else {
            false
        };
        records.push(PlasmidRecord {
            sequence_id,
            lab_id,
            sequence,
            metadata,
            held_out_test,
        });
    }
    let catalog = LabCatalog::from_records(&records);
    Ok(ParsedDataset {
        records,
        catalog,
        rejections,
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Dataset(e.to_string())
}

/// FASTA entries keyed into a sidecar CSV of labels and metadata.
fn parse_fasta_dataset(fasta: &Path, sidecar: &Path) -> Result<ParsedDataset> {
    // Sidecar rows, keyed by sequence_id.
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(sidecar)
        .map_err(|e| Error::Dataset(format!("{}: {e}", sidecar.display())))?;
    let has_split = check_header(reader.headers().map_err(csv_err)?, false, sidecar)?;
    struct SidecarRow {
        lab_id: String,
        metadata: [u8; METADATA_DIM],
        held_out_test: bool,
    }
    let mut side: HashMap<String, SidecarRow> = HashMap::new();
    for row in reader.records() {
        let row = row.map_err(csv_err)?;
        let id = row.get(0).unwrap_or("").to_string();
        let mut metadata = [0u8; METADATA_DIM];
        for (i, col) in METADATA_COLUMNS.iter().enumerate() {
            metadata[i] = parse_flag(row.get(2 + i).unwrap_or(""), col)
                .map_err(Error::Dataset)?;
        }
        let held_out_test = if has_split {
            parse_split_tag(row.get(2 + METADATA_DIM).unwrap_or("")).map_err(Error::Dataset)?
        } else {
            false
        };
        if side
            .insert(
                id.clone(),
                SidecarRow {
                    lab_id: row.get(1).unwrap_or("").to_string(),
                    metadata,
                    held_out_test,
                },
            )
            .is_some()
        {
            return Err(Error::Dataset(format!(
                "{}: duplicate sequence_id {id:?}",
                sidecar.display()
            )));
        }
    }

    let mut records = Vec::new();
    let mut rejections = Vec::new();
    for (id, raw_seq, line) in read_fasta_entries(fasta)? {
        let Some(meta) = side.get(&id) else {
            rejections.push(Rejection {
                line,
                sequence_id: id,
                reason: format!("no sidecar row in {}", sidecar.display()),
            });
            continue;
        };
        match validate_sequence(&raw_seq) {
            Ok(sequence) => records.push(PlasmidRecord {
                sequence_id: id,
                lab_id: meta.lab_id.clone(),
                sequence,
                metadata: meta.metadata,
                held_out_test: meta.held_out_test,
            }),
            Err(reason) => rejections.push(Rejection {
                line,
                sequence_id: id,
                reason,
            }),
        }
    }
    let catalog = LabCatalog::from_records(&records);
    Ok(ParsedDataset {
        records,
        catalog,
        rejections,
    })
}

/// Raw FASTA entries: `(id, concatenated sequence, header line number)`.
fn read_fasta_entries(fasta: &Path) -> Result<Vec<(String, String, u64)>> {
    let text = std::fs::read_to_string(fasta)?;
    let mut entries: Vec<(String, String, u64)> = Vec::new();
    let mut seen_ids: HashSet<String> = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i as u64 + 1;
        if let Some(header) = line.strip_prefix('>') {
            let id = header.split_whitespace().next().unwrap_or("").to_string();
            if id.is_empty() {
                return Err(Error::Dataset(format!(
                    "{}: line {line_no}: empty FASTA id",
                    fasta.display()
                )));
            }
            if !seen_ids.insert(id.clone()) {
                return Err(Error::Dataset(format!(
                    "{}: line {line_no}: duplicate sequence_id {id:?}",
                    fasta.display()
                )));
            }
            entries.push((id, String::new(), line_no));
        } else if !line.trim().is_empty() {
            match entries.last_mut() {
                Some((_, seq, _)) => seq.push_str(line.trim()),
                None => {
                    return Err(Error::Dataset(format!(
                        "{}: line {line_no}: sequence data before any FASTA header",
                        fasta.display()
                    )))
                }
            }
        }
    }
    Ok(entries)
}

/// Query-only FASTA ingest: no labels, zero metadata. Useful for ranking
/// sequences of unknown origin.
pub fn parse_fasta_queries(fasta: &Path) -> Result<ParsedDataset> {
    let mut records = Vec::new();
    let mut rejections = Vec::new();
    for (id, raw_seq, line) in read_fasta_entries(fasta)? {
        match validate_sequence(&raw_seq) {
            Ok(sequence) => records.push(PlasmidRecord {
                sequence_id: id,
                lab_id: "unknown".to_string(),
                sequence,
                metadata: [0u8; METADATA_DIM],
                held_out_test: false,
            }),
            Err(reason) => rejections.push(Rejection {
                line,
                sequence_id: id,
                reason,
            }),
        }
    }
    let catalog = LabCatalog::from_records(&records);
    Ok(ParsedDataset {
        records,
        catalog,
        rejections,
    })
}

/// Writes records back out in the canonical CSV schema (split column
/// included). `parse -> write -> parse` is the identity on valid records.
pub fn write_csv_dataset(records: &[PlasmidRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<&str> = vec!["sequence_id", "lab_id", "sequence"];
    header.extend(METADATA_COLUMNS);
    header.push("split");
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        let mut row: Vec<String> = vec![
            r.sequence_id.clone(),
            r.lab_id.clone(),
            r.sequence.clone(),
        ];
        row.extend(r.metadata.iter().map(|f| f.to_string()));
        row.push(if r.held_out_test { "test".into() } else { String::new() });
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Replaces the lab of every lab with fewer than `min_count` records by the
/// auxiliary class. Counts are taken over the full input.
pub fn relabel_small_labs(records: &[PlasmidRecord], min_count: usize) -> Vec<PlasmidRecord> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in records {
        *counts.entry(r.lab_id.as_str()).or_insert(0) += 1;
    }
    records
        .iter()
        .map(|r| {
            let mut out = r.clone();
            if counts[r.lab_id.as_str()] < min_count {
                out.lab_id = AUXILIARY_LAB.to_string();
            }
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn metadata_cols_csv(flags: &[(usize, u8)]) -> String {
        let mut v = vec![0u8; METADATA_DIM];
        for &(i, f) in flags {
            v[i] = f;
        }
        v.iter()
            .map(|f| f.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    fn csv_header() -> String {
        format!(
            "sequence_id,lab_id,sequence,{}",
            METADATA_COLUMNS.join(",")
        )
    }

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn record(id: &str, lab: &str, seq: &str) -> PlasmidRecord {
        PlasmidRecord {
            sequence_id: id.into(),
            lab_id: lab.into(),
            sequence: seq.into(),
            metadata: [0; METADATA_DIM],
            held_out_test: false,
        }
    }

    #[test]
    fn metadata_layout_is_39_wide() {
        assert_eq!(METADATA_DIM, 39);
        assert_eq!(8 + 3 + 3 + 10 + 5 + 10, 39);
        assert_eq!(METADATA_COLUMNS[2], "growth_strain_dh5alpha");
    }

    #[test]
    fn parses_minimal_csv() {
        let content = format!(
            "{}\ns1,labA,ACGT,{}\ns2,labB,GGTT,{}\n",
            csv_header(),
            metadata_cols_csv(&[]),
            metadata_cols_csv(&[(2, 1)])
        );
        let f = write_temp(&content);
        let parsed = parse_dataset(f.path(), DatasetFormat::Csv).unwrap();
        assert_eq!(parsed.records.len(), 2);
        assert!(parsed.rejections.is_empty());
        // Two input labs plus the auxiliary class.
        assert_eq!(parsed.catalog.len(), 3);
        assert_eq!(parsed.catalog.lab(parsed.catalog.auxiliary_index()), AUXILIARY_LAB);
        // dh5alpha flag sits at canonical position 2.
        assert_eq!(parsed.records[1].metadata[2], 1);
        assert_eq!(encode_metadata(&parsed.records[0]), [0u8; METADATA_DIM]);
    }

    #[test]
    fn bad_alphabet_character_rejects_row_with_line_number() {
        let content = format!(
            "{}\ns1,labA,ACXT,{}\ns2,labA,ACGT,{}\n",
            csv_header(),
            metadata_cols_csv(&[]),
            metadata_cols_csv(&[])
        );
        let f = write_temp(&content);
        let parsed = parse_dataset(f.path(), DatasetFormat::Csv).unwrap();
        assert_eq!(parsed.records.len(), 1);
        assert_eq!(parsed.rejections.len(), 1);
        assert_eq!(parsed.rejections[0].line, 2);
        assert_eq!(parsed.rejections[0].sequence_id, "s1");
        assert!(parsed.rejections[0].reason.contains('X'));
    }

    #[test]
    fn lowercase_sequences_are_normalized() {
        let content = format!("{}\ns1,labA,acgtn,{}\n", csv_header(), metadata_cols_csv(&[]));
        let f = write_temp(&content);
        let parsed = parse_dataset(f.path(), DatasetFormat::Csv).unwrap();
        assert_eq!(parsed.records[0].sequence, "ACGTN");
    }

    #[test]
    fn catalog_orders_labs_by_first_appearance() {
        let records = vec![
            record("s1", "A", "ACGT"),
            record("s2", "B", "ACGT"),
            record("s3", "A", "ACGT"),
        ];
        let catalog = LabCatalog::from_records(&records);
        assert_eq!(catalog.labs(), &["A", "B", AUXILIARY_LAB]);
        assert_eq!(catalog.index_of("A"), Some(0));
        assert_eq!(catalog.index_of("B"), Some(1));
        assert_eq!(catalog.auxiliary_index(), 2);
    }

    #[test]
    fn duplicate_sequence_id_is_fatal() {
        let content = format!(
            "{}\ns1,labA,ACGT,{}\ns1,labB,GGTT,{}\n",
            csv_header(),
            metadata_cols_csv(&[]),
            metadata_cols_csv(&[])
        );
        let f = write_temp(&content);
        assert!(matches!(
            parse_dataset(f.path(), DatasetFormat::Csv),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn missing_column_is_fatal() {
        let content = "sequence_id,lab_id,sequence\na,b,ACGT\n";
        let f = write_temp(content);
        assert!(matches!(
            parse_dataset(f.path(), DatasetFormat::Csv),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn split_column_marks_test_records() {
        let content = format!(
            "{},split\ns1,labA,ACGT,{},test\ns2,labA,GGTT,{},\n",
            csv_header(),
            metadata_cols_csv(&[]),
            metadata_cols_csv(&[])
        );
        let f = write_temp(&content);
        let parsed = parse_dataset(f.path(), DatasetFormat::Csv).unwrap();
        assert!(parsed.records[0].held_out_test);
        assert!(!parsed.records[1].held_out_test);
    }

    #[test]
    fn csv_round_trip_is_identity() {
        let content = format!(
            "{}\ns1,labA,ACGTN,{}\ns2,labB,GGTT,{}\n",
            csv_header(),
            metadata_cols_csv(&[(0, 1), (38, 1)]),
            metadata_cols_csv(&[(10, 1)])
        );
        let f = write_temp(&content);
        let first = parse_dataset(f.path(), DatasetFormat::Csv).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_csv_dataset(&first.records, out.path()).unwrap();
        let second = parse_dataset(out.path(), DatasetFormat::Csv).unwrap();
        assert_eq!(first.records, second.records);
    }

    #[test]
    fn fasta_with_sidecar_parses() {
        let fasta = write_temp(">s1 extra note\nACGT\nACGT\n>s2\nGGTT\n");
        let sidecar = write_temp(&format!(
            "sequence_id,lab_id,{}\ns1,labA,{}\ns2,labB,{}\n",
            METADATA_COLUMNS.join(","),
            metadata_cols_csv(&[(5, 1)]),
            metadata_cols_csv(&[])
        ));
        let parsed = parse_dataset(
            fasta.path(),
            DatasetFormat::FastaWithSidecar {
                sidecar: sidecar.path(),
            },
        )
        .unwrap();
        assert_eq!(parsed.records.len(), 2);
        assert_eq!(parsed.records[0].sequence, "ACGTACGT");
        assert_eq!(parsed.records[0].metadata[5], 1);
        assert_eq!(parsed.records[1].lab_id, "labB");
    }

    #[test]
    fn fasta_entry_without_sidecar_row_is_rejected() {
        let fasta = write_temp(">s1\nACGT\n");
        let sidecar = write_temp(&format!(
            "sequence_id,lab_id,{}\n",
            METADATA_COLUMNS.join(",")
        ));
        let parsed = parse_dataset(
            fasta.path(),
            DatasetFormat::FastaWithSidecar {
                sidecar: sidecar.path(),
            },
        )
        .unwrap();
        assert!(parsed.records.is_empty());
        assert_eq!(parsed.rejections.len(), 1);
    }

    #[test]
    fn relabel_small_labs_boundary() {
        let mut records = Vec::new();
        for i in 0..9 {
            records.push(record(&format!("a{i}"), "small", "ACGT"));
        }
        for i in 0..10 {
            records.push(record(&format!("b{i}"), "big", "ACGT"));
        }
        let out = relabel_small_labs(&records, 10);
        assert!(out[..9].iter().all(|r| r.lab_id == AUXILIARY_LAB));
        assert!(out[9..].iter().all(|r| r.lab_id == "big"));
        assert!(relabel_small_labs(&[], 10).is_empty());
    }

    #[test]
    fn relabel_leaves_no_small_labs_behind() {
        use crate::rng::substream;
        use rand::Rng;
        let mut rng = substream(8, "relabel-prop");
        for _ in 0..20 {
            let n = rng.random_range(0..60);
            let records: Vec<PlasmidRecord> = (0..n)
                .map(|i| {
                    record(
                        &format!("s{i}"),
                        &format!("lab{}", rng.random_range(0..8)),
                        "ACGT",
                    )
                })
                .collect();
            let min_count = rng.random_range(1..6);
            let out = relabel_small_labs(&records, min_count);
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for r in &out {
                *counts.entry(r.lab_id.as_str()).or_insert(0) += 1;
            }
            for (lab, count) in counts {
                if lab != AUXILIARY_LAB {
                    assert!(count >= min_count, "{lab} kept with {count} records");
                }
            }
        }
    }
}
