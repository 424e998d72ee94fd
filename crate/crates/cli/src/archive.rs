//! Bit-exact codebook archives. A fixed little-endian layout with a magic
//! and a version byte pair up front, so state files stay readable across
//! releases and a round trip through disk is the identity on the quantizer
//! and its averaging statistics.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset   size   field
//! 0        4      magic "BRQC"
//! 4        2      format version (u16), currently 1
//! 6        1      float width in bytes: 4 or 8
//! 7        1      flags; bit 0 set when averaging blocks follow the codes
//! 8        1      normalization mode: 0 none, 1 input-only, 2 per-stage
//! 9        4      soft assignment size (u32)
//! 13       4      code dimension D (u32)
//! 17       4      stage count M (u32)
//! 21       8·M    per stage: stage index (u32), code count K (u32)
//! 21+8·M   ...    codes: per stage, K·D floats row-major
//! ```
//!
//! When bit 0 of the flags is set, one averaging block per stage follows
//! the codes, in stage order: decay and smoothing constant (floats), step
//! counter (u64), K decayed counts, K·D running sums, K initial code
//! norms, a supremum count (u32), and that many per-slot norm suprema.
//! Files are written through a temp-and-rename, never in place.

use std::path::Path;

use resq_core::{
    Codebook, EmaState, EmaState32, EmaState64, NormalizationMode, Real, ResidualQuantizer,
    ResidualQuantizer32, ResidualQuantizer64,
};

use crate::{io_error, write_atomic, CliError, Result};

pub const MAGIC: [u8; 4] = *b"BRQC";
pub const FORMAT_VERSION: u16 = 1;

const FLAG_EMA: u8 = 1;

/// Size of the fixed header for a given stage count: everything before
/// the first code vector.
pub const fn header_len(num_stages: usize) -> usize {
    21 + 8 * num_stages
}

/// Floats the archive can carry; implemented for exactly the two widths
/// the format's width byte declares.
pub trait ArchiveFloat: Real {
    const WIDTH: usize;
    fn push_le(self, out: &mut Vec<u8>);
    /// `bytes` holds exactly [`WIDTH`](Self::WIDTH) bytes.
    fn from_le(bytes: &[u8]) -> Self;
}

impl ArchiveFloat for f32 {
    const WIDTH: usize = 4;
    fn push_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("width-checked slice"))
    }
}

impl ArchiveFloat for f64 {
    const WIDTH: usize = 8;
    fn push_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("width-checked slice"))
    }
}

fn normalization_byte(mode: NormalizationMode) -> u8 {
    match mode {
        NormalizationMode::None => 0,
        NormalizationMode::InputOnly => 1,
        NormalizationMode::PerStage => 2,
    }
}

fn normalization_from_byte(byte: u8) -> Option<NormalizationMode> {
    match byte {
        0 => Some(NormalizationMode::None),
        1 => Some(NormalizationMode::InputOnly),
        2 => Some(NormalizationMode::PerStage),
        _ => None,
    }
}

fn u32_field(name: &'static str, value: usize) -> Result<u32> {
    u32::try_from(value).map_err(|_| {
        CliError::Validation(format!(
            "archive: {name} {value} exceeds the format's 32-bit field"
        ))
    })
}

fn encode<F: ArchiveFloat>(
    rq: &ResidualQuantizer<F>,
    ema: Option<&[EmaState<F>]>,
) -> Result<Vec<u8>> {
    if let Some(states) = ema {
        if states.len() != rq.num_stages() {
            return Err(CliError::Validation(format!(
                "archive: {} averaging blocks for {} stages",
                states.len(),
                rq.num_stages()
            )));
        }
        for (cb, state) in rq.stages().iter().zip(states) {
            if state.len() != cb.len() || state.dim() != cb.dim() {
                return Err(CliError::Validation(format!(
                    "archive: averaging block shape {}x{} does not match stage {} shape {}x{}",
                    state.len(),
                    state.dim(),
                    cb.stage_index(),
                    cb.len(),
                    cb.dim()
                )));
            }
        }
    }

    let mut out = Vec::with_capacity(header_len(rq.num_stages()));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(F::WIDTH as u8);
    out.push(if ema.is_some() { FLAG_EMA } else { 0 });
    out.push(normalization_byte(rq.normalization()));
    out.extend_from_slice(&u32_field("soft_k", rq.soft_k())?.to_le_bytes());
    out.extend_from_slice(&u32_field("dim", rq.dim())?.to_le_bytes());
    out.extend_from_slice(&u32_field("num_stages", rq.num_stages())?.to_le_bytes());
    for cb in rq.stages() {
        out.extend_from_slice(&u32_field("stage_index", cb.stage_index())?.to_le_bytes());
        out.extend_from_slice(&u32_field("codebook_size", cb.len())?.to_le_bytes());
    }
    for cb in rq.stages() {
        for &x in cb.codes() {
            x.push_le(&mut out);
        }
    }
    if let Some(states) = ema {
        for state in states {
            state.gamma().push_le(&mut out);
            state.epsilon().push_le(&mut out);
            out.extend_from_slice(&state.step().to_le_bytes());
            for &n in state.counts() {
                n.push_le(&mut out);
            }
            for i in 0..state.len() {
                for &m in state.running(i) {
                    m.push_le(&mut out);
                }
            }
            for &a in state.initial_code_norms() {
                a.push_le(&mut out);
            }
            let sups = state.sample_norm_sups();
            out.extend_from_slice(&u32_field("sample_norm_sups", sups.len())?.to_le_bytes());
            for &s in sups {
                s.push_le(&mut out);
            }
        }
    }
    Ok(out)
}

/// Writes the quantizer — and, when given, its per-stage averaging
/// statistics — to `path` atomically. Returns the number of bytes written.
pub fn save_codebooks<F: ArchiveFloat>(
    path: &Path,
    rq: &ResidualQuantizer<F>,
    ema: Option<&[EmaState<F>]>,
) -> Result<u64> {
    let bytes = encode(rq, ema)?;
    write_atomic(path, &bytes).map_err(io_error("writing archive", path))?;
    Ok(bytes.len() as u64)
}

/// A loaded archive, at whichever float width the file declared.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedArchive {
    F32 {
        quantizer: ResidualQuantizer32,
        ema: Option<Vec<EmaState32>>,
    },
    F64 {
        quantizer: ResidualQuantizer64,
        ema: Option<Vec<EmaState64>>,
    },
}

impl LoadedArchive {
    pub fn dim(&self) -> usize {
        match self {
            LoadedArchive::F32 { quantizer, .. } => quantizer.dim(),
            LoadedArchive::F64 { quantizer, .. } => quantizer.dim(),
        }
    }

    pub fn stage_sizes(&self) -> Vec<usize> {
        match self {
            LoadedArchive::F32 { quantizer, .. } => quantizer.stage_sizes(),
            LoadedArchive::F64 { quantizer, .. } => quantizer.stage_sizes(),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CliError::Validation(format!(
                "archive: truncated payload: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        };
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn float<F: ArchiveFloat>(&mut self) -> Result<F> {
        Ok(F::from_le(self.take(F::WIDTH)?))
    }

    fn floats<F: ArchiveFloat>(&mut self, n: usize) -> Result<Vec<F>> {
        let byte_count = n.checked_mul(F::WIDTH).ok_or_else(|| {
            CliError::Validation("archive: float block size overflows".to_string())
        })?;
        Ok(self
            .take(byte_count)?
            .chunks_exact(F::WIDTH)
            .map(F::from_le)
            .collect())
    }
}

type Decoded<F> = (ResidualQuantizer<F>, Option<Vec<EmaState<F>>>);

fn decode_typed<F: ArchiveFloat>(
    reader: &mut Reader,
    normalization: NormalizationMode,
    soft_k: usize,
    dim: usize,
    stage_shapes: &[(usize, usize)],
    with_ema: bool,
) -> Result<Decoded<F>> {
    let mut stages = Vec::with_capacity(stage_shapes.len());
    for &(stage_index, k) in stage_shapes {
        let count = k.checked_mul(dim).ok_or_else(|| {
            CliError::Validation("archive: stage size overflows".to_string())
        })?;
        let codes = reader.floats::<F>(count)?;
        stages.push(Codebook::new(stage_index, dim, codes)?);
    }
    let quantizer = ResidualQuantizer::new(stages, normalization, soft_k)?;
    if !with_ema {
        return Ok((quantizer, None));
    }
    let mut ema = Vec::with_capacity(stage_shapes.len());
    for &(_, k) in stage_shapes {
        let gamma = reader.float::<F>()?;
        let epsilon = reader.float::<F>()?;
        let step = reader.u64()?;
        let counts = reader.floats::<F>(k)?;
        let running = reader.floats::<F>(k * dim)?;
        let norms = reader.floats::<F>(k)?;
        let sup_len = reader.u32()? as usize;
        let sups = reader.floats::<F>(sup_len)?;
        ema.push(EmaState::from_parts(
            gamma, epsilon, dim, counts, running, step, norms, sups,
        )?);
    }
    Ok((quantizer, Some(ema)))
}

fn decode(bytes: &[u8]) -> Result<LoadedArchive> {
    let mut reader = Reader { bytes, pos: 0 };
    let magic = reader.take(4)?;
    if magic != MAGIC {
        return Err(CliError::Validation(format!(
            "archive: bad magic {magic:02x?}, expected {MAGIC:02x?}"
        )));
    }
    let version = reader.u16()?;
    if version != FORMAT_VERSION {
        return Err(CliError::Validation(format!(
            "archive: unsupported format version {version}; this build reads version {FORMAT_VERSION}"
        )));
    }
    let width = reader.u8()?;
    let flags = reader.u8()?;
    let normalization = normalization_from_byte(reader.u8()?).ok_or_else(|| {
        CliError::Validation("archive: unknown normalization mode byte".to_string())
    })?;
    let soft_k = reader.u32()? as usize;
    let dim = reader.u32()? as usize;
    let num_stages = reader.u32()? as usize;
    let mut stage_shapes = Vec::with_capacity(num_stages.min(4096));
    for _ in 0..num_stages {
        let stage_index = reader.u32()? as usize;
        let k = reader.u32()? as usize;
        stage_shapes.push((stage_index, k));
    }
    let with_ema = flags & FLAG_EMA != 0;
    let loaded = match width {
        4 => {
            let (quantizer, ema) =
                decode_typed::<f32>(&mut reader, normalization, soft_k, dim, &stage_shapes, with_ema)?;
            LoadedArchive::F32 { quantizer, ema }
        }
        8 => {
            let (quantizer, ema) =
                decode_typed::<f64>(&mut reader, normalization, soft_k, dim, &stage_shapes, with_ema)?;
            LoadedArchive::F64 { quantizer, ema }
        }
        other => {
            return Err(CliError::Validation(format!(
                "archive: unsupported float width {other}, expected 4 or 8"
            )))
        }
    };
    if reader.pos != bytes.len() {
        return Err(CliError::Validation(format!(
            "archive: {} trailing bytes after the declared content",
            bytes.len() - reader.pos
        )));
    }
    Ok(loaded)
}

/// Reads an archive back. The file's width byte selects the returned
/// variant; both widths validate against the same layout.
pub fn load_codebooks(path: &Path) -> Result<LoadedArchive> {
    let bytes = std::fs::read(path).map_err(io_error("reading archive", path))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use resq_core::training::ema_step;
    use resq_core::{BatchAssignment64, LatentSequence64};

    fn sample_quantizer() -> ResidualQuantizer64 {
        let stage1 = Codebook::from_rows(1, &[vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap();
        let stage2 = Codebook::from_rows(2, &[vec![0.125, 0.0], vec![-0.75, 1.5], vec![3.0, -2.0]])
            .unwrap();
        ResidualQuantizer::new(vec![stage1, stage2], NormalizationMode::InputOnly, 1).unwrap()
    }

    fn stepped_states(rq: &mut ResidualQuantizer64) -> Vec<EmaState64> {
        let batches = [
            BatchAssignment64::new(
                LatentSequence64::from_rows(&[vec![1.0, 0.5], vec![-0.5, 2.0]]).unwrap(),
                vec![0, 1],
            )
            .unwrap(),
            BatchAssignment64::new(
                LatentSequence64::from_rows(&[vec![0.25, -0.125], vec![1.5, 1.0]]).unwrap(),
                vec![1, 2],
            )
            .unwrap(),
        ];
        batches
            .iter()
            .enumerate()
            .map(|(m, batch)| {
                let cb = rq.stage_mut(m);
                let mut state = EmaState::new(cb, 0.9, 1e-4).unwrap();
                ema_step(&mut state, cb, batch).unwrap();
                state
            })
            .collect()
    }

    #[test]
    fn round_trip_is_the_identity_on_quantizer_and_statistics() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codes.brqc");
        let mut rq = sample_quantizer();
        let ema = stepped_states(&mut rq);

        save_codebooks(&path, &rq, Some(&ema)).unwrap();
        let LoadedArchive::F64 {
            quantizer,
            ema: loaded_ema,
        } = load_codebooks(&path).unwrap()
        else {
            panic!("saved 64-bit floats, loaded something else");
        };
        assert_eq!(quantizer, rq);
        assert_eq!(loaded_ema.as_deref(), Some(&ema[..]));

        // Saving the loaded state reproduces the file byte for byte.
        let second = dir.path().join("codes2.brqc");
        save_codebooks(&second, &quantizer, loaded_ema.as_deref()).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&second).unwrap()
        );
    }

    #[test]
    fn thirty_two_bit_archives_round_trip_too() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codes32.brqc");
        let stage = Codebook::<f32>::from_rows(1, &[vec![0.5, -1.5], vec![0.25, 2.0]]).unwrap();
        let rq = ResidualQuantizer::new(vec![stage], NormalizationMode::None, 2).unwrap();
        save_codebooks(&path, &rq, None).unwrap();
        let LoadedArchive::F32 { quantizer, ema } = load_codebooks(&path).unwrap() else {
            panic!("saved 32-bit floats, loaded something else");
        };
        assert_eq!(quantizer, rq);
        assert_eq!(ema, None);
    }

    #[test]
    fn the_codes_payload_is_exactly_stage_times_dim_floats() {
        // Four stages of 16 codes in 8 dimensions at 8 bytes per float:
        // 4·16·8·8 = 4096 payload bytes after the fixed header.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sized.brqc");
        let stages: Vec<Codebook<f64>> = (1..=4)
            .map(|m| Codebook::new(m, 8, vec![0.25; 16 * 8]).unwrap())
            .collect();
        let rq = ResidualQuantizer::new(stages, NormalizationMode::InputOnly, 1).unwrap();
        let written = save_codebooks(&path, &rq, None).unwrap();
        assert_eq!(written, (header_len(4) + 4096) as u64);
        assert_eq!(std::fs::read(&path).unwrap().len(), header_len(4) + 4096);
    }

    #[test]
    fn corruption_fails_with_named_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codes.brqc");
        let rq = sample_quantizer();
        save_codebooks(&path, &rq, None).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        let err = load_codebooks(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "got: {err}");

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        std::fs::write(&path, &bad_version).unwrap();
        let err = load_codebooks(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "got: {err}");

        std::fs::write(&path, &good[..good.len() - 1]).unwrap();
        let err = load_codebooks(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "got: {err}");

        let mut trailing = good.clone();
        trailing.push(0);
        std::fs::write(&path, &trailing).unwrap();
        let err = load_codebooks(&path).unwrap_err();
        assert!(err.to_string().contains("trailing"), "got: {err}");
    }
}
