//! Input normalization (eye registration) and pluggable domain adapters.
//!
//! An adapter is any image-to-image map that keeps the dimensions. The
//! pipeline applies it to raw inputs before registration, so swapping one
//! adapter for another never touches the trained models.

mod register;

use std::io::Read;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use crate::image::GrayImage;

pub use register::{
    register, registration_transform, RegistrationConfig, RegistrationTransform,
};
pub(crate) use register::sample_registered;

#[derive(Debug, thiserror::Error)]
pub enum AdaptError {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("landmarks: {0}")]
    Landmarks(String),
    #[error("stylizer levels must be in 2..=256, got {0}")]
    Levels(u32),
    #[error("unknown stylizer {0:?}")]
    UnknownStylizer(String),
    #[error("adapter {adapter}: {message}")]
    Stage { adapter: String, message: String },
}

/// Image-to-image stage placed in front of the inference pipeline.
pub trait DomainAdapter: Send + Sync {
    fn id(&self) -> String;

    fn adapt(&self, image: &GrayImage) -> Result<GrayImage, AdaptError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityAdapter;

impl DomainAdapter for IdentityAdapter {
    fn id(&self) -> String {
        "identity".into()
    }

    fn adapt(&self, image: &GrayImage) -> Result<GrayImage, AdaptError> {
        Ok(image.clone())
    }
}

pub fn identity_adapter(image: &GrayImage) -> GrayImage {
    image.clone()
}

/// Posterization into `levels` bands of equal width in gamma-shifted
/// intensity `(x / 255)^STYLIZER_GAMMA`, so dark tones share few wide bands
/// and bright tones get narrow ones.
///
/// Each band is represented by its member closest to the preimage of the
/// band center. The output is therefore a fixed point of the same stylizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyStylizer {
    levels: u32,
    lut: [u8; 256],
}

pub const STYLIZER_GAMMA: f64 = 2.0;

impl ToyStylizer {
    pub fn new(levels: u32) -> Result<Self, AdaptError> {
        if !(2..=256).contains(&levels) {
            return Err(AdaptError::Levels(levels));
        }
        let l = levels as f64;
        let band = |x: usize| ((l * (x as f64 / 255.0).powf(STYLIZER_GAMMA)).floor() as u32).min(levels - 1);
        let mut lut = [0u8; 256];
        let mut start = 0;
        while start < 256 {
            let q = band(start);
            let mut end = start;
            while end + 1 < 256 && band(end + 1) == q {
                end += 1;
            }
            let ideal = 255.0 * ((q as f64 + 0.5) / l).powf(1.0 / STYLIZER_GAMMA);
            let rep = ideal.round().clamp(start as f64, end as f64) as u8;
            lut[start..=end].fill(rep);
            start = end + 1;
        }
        Ok(Self { levels, lut })
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn apply(&self, image: &GrayImage) -> GrayImage {
        GrayImage {
            width: image.width,
            height: image.height,
            data: image.data.iter().map(|&v| self.lut[v as usize]).collect(),
        }
    }
}

impl DomainAdapter for ToyStylizer {
    fn id(&self) -> String {
        format!("posterize:{}", self.levels)
    }

    fn adapt(&self, image: &GrayImage) -> Result<GrayImage, AdaptError> {
        Ok(self.apply(image))
    }
}

pub fn toy_stylizer(image: &GrayImage, levels: u32) -> Result<GrayImage, AdaptError> {
    Ok(ToyStylizer::new(levels)?.apply(image))
}

/// Adapter that maps inference inputs into the domain produced by
/// `stylizer_id`, the style the models were trained on.
///
/// Recognized ids: `identity` and `posterize:<levels>`. The toy stylizer is
/// idempotent, so its inverse adapter is the stylizer itself.
pub fn inverse_adapter_for(stylizer_id: &str) -> Result<Box<dyn DomainAdapter>, AdaptError> {
    if stylizer_id == "identity" {
        return Ok(Box::new(IdentityAdapter));
    }
    if let Some(levels) = stylizer_id.strip_prefix("posterize:") {
        let levels: u32 = levels
            .parse()
            .map_err(|_| AdaptError::UnknownStylizer(stylizer_id.to_string()))?;
        return Ok(Box::new(ToyStylizer::new(levels)?));
    }
    Err(AdaptError::UnknownStylizer(stylizer_id.to_string()))
}

/// Rebuilds an adapter from its [`DomainAdapter::id`]: `identity`,
/// `posterize:<levels>` or `external:<command words>`.
pub fn adapter_from_id(id: &str) -> Result<Box<dyn DomainAdapter>, AdaptError> {
    if let Some(cmd) = id.strip_prefix("external:") {
        let command: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
        if command.is_empty() {
            return Err(AdaptError::UnknownStylizer(id.to_string()));
        }
        return Ok(Box::new(ExternalAdapter::with_env_timeout(command)));
    }
    inverse_adapter_for(id)
}

/// Environment variable holding the external adapter timeout in seconds.
pub const TIMEOUT_ENV: &str = "PARAMFACE_ADAPTER_TIMEOUT_SECS";

/// Wraps an external program run as `<cmd...> <in.png> <out.png>`.
///
/// The program must exit with status 0 and write a PNG of the same size.
#[derive(Debug, Clone)]
pub struct ExternalAdapter {
    pub command: Vec<String>,
    pub timeout: Duration,
}

impl ExternalAdapter {
    pub fn new(command: Vec<String>, timeout: Duration) -> Self {
        Self { command, timeout }
    }

    /// Timeout from [`TIMEOUT_ENV`], 60 s when unset or unparsable.
    pub fn with_env_timeout(command: Vec<String>) -> Self {
        Self::new(command, env_timeout())
    }

    fn stage_err(&self, message: impl Into<String>) -> AdaptError {
        AdaptError::Stage {
            adapter: self.id(),
            message: message.into(),
        }
    }

    fn run(&self, input: &Path, output: &Path) -> Result<(), AdaptError> {
        run_external(&self.command, self.timeout, input, output).map_err(|m| self.stage_err(m))
    }
}

/// Runs `<command...> <input> <output>` and waits at most `timeout` for a
/// zero exit status.
pub(crate) fn run_external(command: &[String], timeout: Duration, input: &Path, output: &Path) -> Result<(), String> {
    let (program, args) = command.split_first().ok_or("empty command")?;
    let mut child = Command::new(program)
        .args(args)
        .arg(input)
        .arg(output)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| format!("spawn failed: {e}"))?;
    let start = Instant::now();
    loop {
        match child.try_wait() {
            Ok(Some(status)) => {
                if status.success() {
                    return Ok(());
                }
                let mut stderr = String::new();
                if let Some(mut s) = child.stderr.take() {
                    let _ = s.read_to_string(&mut stderr);
                }
                return Err(format!(
                    "exited with {status}: {}",
                    stderr.lines().next().unwrap_or("").trim()
                ));
            }
            Ok(None) if start.elapsed() >= timeout => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(format!("timed out after {timeout:?}"));
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(5)),
            Err(e) => return Err(format!("wait failed: {e}")),
        }
    }
}

/// Timeout from [`TIMEOUT_ENV`], 60 s when unset or unparsable.
pub(crate) fn env_timeout() -> Duration {
    let secs = std::env::var(TIMEOUT_ENV)
        .ok()
        .and_then(|v| v.parse::<f64>().ok())
        .filter(|v| *v > 0.0)
        .unwrap_or(60.0);
    Duration::from_secs_f64(secs)
}

impl DomainAdapter for ExternalAdapter {
    fn id(&self) -> String {
        format!("external:{}", self.command.join(" "))
    }

    fn adapt(&self, image: &GrayImage) -> Result<GrayImage, AdaptError> {
        let dir = tempfile::tempdir().map_err(|e| self.stage_err(format!("tempdir: {e}")))?;
        let input = dir.path().join("in.png");
        let output = dir.path().join("out.png");
        image
            .save_png(&input)
            .map_err(|e| self.stage_err(e.to_string()))?;
        self.run(&input, &output)?;
        let out = GrayImage::load_png(&output).map_err(|e| self.stage_err(e.to_string()))?;
        if (out.width, out.height) != (image.width, image.height) {
            return Err(self.stage_err(format!(
                "size mismatch: produced {}x{}, expected {}x{}",
                out.width, out.height, image.width, image.height
            )));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> GrayImage {
        GrayImage::from_fn(16, 16, |x, y| (x + 16 * y) as u8)
    }

    #[test]
    fn adapters_rebuild_from_ids() {
        for id in ["identity", "posterize:4", "external:cp -f"] {
            assert_eq!(adapter_from_id(id).unwrap().id(), id);
        }
        assert!(adapter_from_id("external:").is_err());
        assert!(adapter_from_id("blur:3").is_err());
    }

    #[test]
    fn identity_is_byte_exact() {
        let img = ramp();
        assert_eq!(identity_adapter(&img), img);
        assert_eq!(IdentityAdapter.adapt(&IdentityAdapter.adapt(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn stylizer_is_idempotent_and_bounded() {
        let img = ramp();
        for levels in [2, 3, 4, 7, 16, 100, 256] {
            let once = toy_stylizer(&img, levels).unwrap();
            assert_eq!(toy_stylizer(&once, levels).unwrap(), once);
            let mut distinct: Vec<u8> = once.data.clone();
            distinct.sort_unstable();
            distinct.dedup();
            assert!(distinct.len() <= levels as usize);
        }
        assert!(matches!(ToyStylizer::new(1), Err(AdaptError::Levels(1))));
    }

    #[test]
    fn four_level_bands() {
        let s = ToyStylizer::new(4).unwrap();
        // Band edges at 255 * sqrt(k / 4); representatives at
        // 255 * sqrt((k + 0.5) / 4).
        let expect = |x: usize| match x {
            0..=127 => 90,
            128..=180 => 156,
            181..=220 => 202,
            _ => 239,
        };
        for x in 0..256 {
            assert_eq!(s.lut[x], expect(x), "level {x}");
        }
    }

    #[test]
    fn inverse_adapter_ids() {
        assert_eq!(inverse_adapter_for("posterize:4").unwrap().id(), "posterize:4");
        assert_eq!(inverse_adapter_for("identity").unwrap().id(), "identity");
        assert!(matches!(
            inverse_adapter_for("cartoon"),
            Err(AdaptError::UnknownStylizer(_))
        ));
        assert!(inverse_adapter_for("posterize:1").is_err());
    }

    #[test]
    fn external_copy_behaves_as_identity() {
        let a = ExternalAdapter::new(vec!["cp".into()], Duration::from_secs(10));
        let img = ramp();
        assert_eq!(a.adapt(&img).unwrap(), img);
    }

    #[test]
    fn external_failures_name_the_adapter() {
        let a = ExternalAdapter::new(vec!["false".into()], Duration::from_secs(10));
        match a.adapt(&ramp()) {
            Err(AdaptError::Stage { adapter, .. }) => assert_eq!(adapter, "external:false"),
            other => panic!("expected stage error, got {other:?}"),
        }
        let slow = ExternalAdapter::new(
            vec!["sh".into(), "-c".into(), "sleep 5".into(), "sh".into()],
            Duration::from_millis(100),
        );
        assert!(matches!(slow.adapt(&ramp()), Err(AdaptError::Stage { .. })));
    }

    #[test]
    fn external_wrong_size_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let small = dir.path().join("small.png");
        GrayImage::new(4, 4, 9).save_png(&small).unwrap();
        let a = ExternalAdapter::new(
            vec![
                "sh".into(),
                "-c".into(),
                format!("cp {} \"$2\"", small.display()),
                "sh".into(),
            ],
            Duration::from_secs(10),
        );
        match a.adapt(&ramp()) {
            Err(AdaptError::Stage { message, .. }) => assert!(message.contains("size mismatch"), "{message}"),
            other => panic!("expected size mismatch, got {other:?}"),
        }
    }
}
