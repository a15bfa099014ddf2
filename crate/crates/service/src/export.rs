use std::str::FromStr;

use mpada_core::acquisition::Session;
use mpada_core::datastore::archive::{manifest_json, MANIFEST};
use mpada_core::datastore::timeseries::modality_ids;
use mpada_core::datastore::{build_archive, modality_csv, trace_files, write_timeseries_csv, DatastoreError};

use crate::api::ApiError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    S2p,
    Snapshot,
}

impl FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "s2p" => Ok(ExportFormat::S2p),
            "snapshot" => Ok(ExportFormat::Snapshot),
            other => Err(format!("unknown export format {other:?}; expected csv, s2p or snapshot")),
        }
    }
}

pub struct Export {
    pub content_type: &'static str,
    pub filename: String,
    pub bytes: Vec<u8>,
}

const TAR: &str = "application/x-tar";

/// Uncompressed tar with fixed metadata, so equal inputs give equal bytes.
pub fn tar_bundle(entries: &[(String, Vec<u8>)]) -> Vec<u8> {
    let mut b = tar::Builder::new(Vec::new());
    for (name, data) in entries {
        let mut h = tar::Header::new_ustar();
        h.set_size(data.len() as u64);
        h.set_mode(0o644);
        h.set_mtime(0);
        h.set_entry_type(tar::EntryType::Regular);
        b.append_data(&mut h, name, data.as_slice()).expect("in-memory tar");
    }
    b.into_inner().expect("in-memory tar")
}

fn datastore(e: DatastoreError) -> ApiError {
    match e {
        DatastoreError::SessionRunning => ApiError::Unprocessable(e.to_string()),
        DatastoreError::BadModalityId(_) | DatastoreError::MixedModality(_) | DatastoreError::NonFinite(_) => {
            ApiError::Unprocessable(e.to_string())
        }
        other => ApiError::Internal(other.to_string()),
    }
}

/// One export of a finished session. `selector` names a modality (csv) or
/// a trace index (s2p); without it every file is bundled in a tar.
pub fn export(session: &Session, format: ExportFormat, selector: Option<&str>) -> Result<Export, ApiError> {
    let id = &session.id;
    match (format, selector) {
        (ExportFormat::Csv, Some(m)) => {
            if !modality_ids(session).iter().any(|x| x == m) {
                return Err(ApiError::NotFound(format!("{id}/{m}")));
            }
            Ok(Export {
                content_type: "text/csv",
                filename: format!("{m}.csv"),
                bytes: modality_csv(session, m).map_err(datastore)?.into_bytes(),
            })
        }
        (ExportFormat::Csv, None) => {
            let files: Vec<_> = write_timeseries_csv(session)
                .map_err(datastore)?
                .into_iter()
                .map(|(n, t)| (n, t.into_bytes()))
                .collect();
            Ok(Export {
                content_type: TAR,
                filename: format!("{id}-csv.tar"),
                bytes: tar_bundle(&files),
            })
        }
        (ExportFormat::S2p, Some(k)) => {
            let k: usize = k.parse().map_err(|_| ApiError::BadRequest(format!("bad trace index {k:?}")))?;
            let files = trace_files(session).map_err(datastore)?;
            let (entry, text) = files
                .into_iter()
                .nth(k)
                .ok_or_else(|| ApiError::NotFound(format!("{id}/trace-{k}")))?;
            Ok(Export {
                content_type: "text/plain",
                filename: entry.file,
                bytes: text.into_bytes(),
            })
        }
        (ExportFormat::S2p, None) => {
            let files: Vec<_> = trace_files(session)
                .map_err(datastore)?
                .into_iter()
                .map(|(e, t)| (e.file, t.into_bytes()))
                .collect();
            Ok(Export {
                content_type: TAR,
                filename: format!("{id}-s2p.tar"),
                bytes: tar_bundle(&files),
            })
        }
        (ExportFormat::Snapshot, _) => {
            let (manifest, files) = build_archive(session).map_err(datastore)?;
            let mut entries: Vec<(String, Vec<u8>)> =
                vec![(format!("{id}/{MANIFEST}"), manifest_json(&manifest).into_bytes())];
            entries.extend(files.into_iter().map(|(n, b)| (format!("{id}/{n}"), b)));
            Ok(Export {
                content_type: TAR,
                filename: format!("{id}.tar"),
                bytes: tar_bundle(&entries),
            })
        }
    }
}
