//! Deterministic HTTP server for fetch tests and the bundled corpus.
//!
//! Routes (every response is a pure function of the path and server seed,
//! except the hit-counting `flaky` route):
//!
//! | path                               | response                                    |
//! |------------------------------------|---------------------------------------------|
//! | `/robots.txt`                      | disallows `/private/`                       |
//! | `/img/{w}x{h}-{rrggbb}-{seed}.jpg` | noisy solid-colour JPEG (`.png` for PNG)    |
//! | `/pad/{len}/{img spec}`            | that JPEG padded to exactly `len` bytes     |
//! | `/flaky/{n}/{route}`               | 503 for the first `n` hits, then `{route}`  |
//! | `/slow/{ms}/{route}`               | `{route}` after an extra delay              |
//! | `/status/{code}/...`               | empty body with that status                 |
//! | `/garbage/{len}/...`               | `len` pseudo-random non-image bytes         |
//! | `/bomb/{w}x{h}.png`                | PNG header declaring `w`×`h`, no pixel data |
//! | `/private/{route}`                 | `{route}` (blocked by robots.txt)           |
//!
//! Every request first waits the configured base latency.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use crate::imageops::encode_jpeg;

/// Host name fixture URLs use; fetchers route it to the server address.
pub const FIXTURE_HOST: &str = "fixture.test";
const MAX_RENDER_PIXELS: u64 = 16_000_000;
const NOISE: i32 = 24;
const JPEG_QUALITY: u8 = 90;

pub fn fixture_url(path: &str) -> String {
    format!("http://{FIXTURE_HOST}{path}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureConfig {
    pub seed: u64,
    pub latency_ms: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self { seed: 0, latency_ms: 0 }
    }
}

fn noisy_pixels(width: u32, height: u32, rgb: [u8; 3], seed: u64) -> image::RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    image::RgbImage::from_fn(width, height, |_, _| {
        let mut px = [0u8; 3];
        for (c, base) in px.iter_mut().zip(rgb) {
            *c = (i32::from(base) + rng.random_range(-NOISE..=NOISE)).clamp(0, 255) as u8;
        }
        image::Rgb(px)
    })
}

/// Noisy solid-colour JPEG; the mean colour stays close to `rgb`.
pub fn render_image(width: u32, height: u32, rgb: [u8; 3], seed: u64) -> Vec<u8> {
    encode_jpeg(&noisy_pixels(width, height, rgb, seed), JPEG_QUALITY)
}

pub fn render_png(width: u32, height: u32, rgb: [u8; 3], seed: u64) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    noisy_pixels(width, height, rgb, seed)
        .write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory PNG");
    out.into_inner()
}

/// Inserts comment segments after SOI so the file is exactly `target`
/// bytes; falls back to trailing zeros when fewer than 4 bytes are missing.
pub fn pad_jpeg(jpeg: &[u8], target: usize) -> Vec<u8> {
    if target <= jpeg.len() {
        return jpeg.to_vec();
    }
    let mut extra = target - jpeg.len();
    let mut out = Vec::with_capacity(target);
    out.extend_from_slice(&jpeg[..2]);
    while extra >= 4 {
        let payload = (extra - 4).min(65_533);
        out.extend_from_slice(&[0xFF, 0xFE]);
        out.extend_from_slice(&((payload + 2) as u16).to_be_bytes());
        out.resize(out.len() + payload, b' ');
        extra -= payload + 4;
    }
    out.extend_from_slice(&jpeg[2..]);
    out.resize(target, 0);
    out
}

fn png_chunk(out: &mut Vec<u8>, kind: &[u8; 4], data: &[u8]) {
    out.extend_from_slice(&(data.len() as u32).to_be_bytes());
    out.extend_from_slice(kind);
    out.extend_from_slice(data);
    let mut crc = flate2::Crc::new();
    crc.update(kind);
    crc.update(data);
    out.extend_from_slice(&crc.sum().to_be_bytes());
}

/// PNG whose header declares `width`×`height` but carries almost no pixel data,
/// padded with a text chunk to `pad` bytes.
pub fn png_bomb(width: u32, height: u32, pad: usize) -> Vec<u8> {
    let mut out = b"\x89PNG\r\n\x1a\n".to_vec();
    let mut ihdr = Vec::with_capacity(13);
    ihdr.extend_from_slice(&width.to_be_bytes());
    ihdr.extend_from_slice(&height.to_be_bytes());
    ihdr.extend_from_slice(&[8, 2, 0, 0, 0]);
    png_chunk(&mut out, b"IHDR", &ihdr);
    let idat = {
        use std::io::Write;
        let mut z = flate2::write::ZlibEncoder::new(Vec::new(), flate2::Compression::default());
        z.write_all(&[0u8; 64]).expect("in-memory deflate");
        z.finish().expect("in-memory deflate")
    };
    let mut text = b"Comment\0".to_vec();
    let len = pad.saturating_sub(out.len() + 36 + idat.len()).max(text.len());
    text.resize(len, b'x');
    png_chunk(&mut out, b"tEXt", &text);
    png_chunk(&mut out, b"IDAT", &idat);
    png_chunk(&mut out, b"IEND", &[]);
    out
}

#[derive(Debug, Default)]
struct Counters {
    requests: AtomicU64,
    in_flight: AtomicU64,
    peak_in_flight: AtomicU64,
}

#[derive(Debug)]
struct FixtureState {
    config: FixtureConfig,
    counters: Counters,
    hits: Mutex<HashMap<String, u32>>,
    cache: Mutex<HashMap<String, Arc<Vec<u8>>>>,
}

struct ImageSpec {
    width: u32,
    height: u32,
    rgb: [u8; 3],
    seed: u64,
    png: bool,
}

fn parse_image_spec(spec: &str) -> Option<ImageSpec> {
    let (stem, png) = if let Some(s) = spec.strip_suffix(".jpg") {
        (s, false)
    } else {
        (spec.strip_suffix(".png")?, true)
    };
    let mut parts = stem.splitn(3, '-');
    let (w, h) = parts.next()?.split_once('x')?;
    let hex = parts.next()?;
    let seed = parts.next()?.parse().ok()?;
    if hex.len() != 6 {
        return None;
    }
    let channel = |i: usize| u8::from_str_radix(&hex[i..i + 2], 16).ok();
    let spec = ImageSpec {
        width: w.parse().ok()?,
        height: h.parse().ok()?,
        rgb: [channel(0)?, channel(2)?, channel(4)?],
        seed,
        png,
    };
    let pixels = u64::from(spec.width) * u64::from(spec.height);
    (pixels > 0 && pixels <= MAX_RENDER_PIXELS).then_some(spec)
}

fn bytes_response(bytes: Vec<u8>, content_type: &'static str) -> Response {
    ([(header::CONTENT_TYPE, content_type)], bytes).into_response()
}

/// Bytes the server returns for `/img/{spec}`, e.g. `96x96-c81e1e-4.jpg`.
pub fn render_spec(config: &FixtureConfig, spec_str: &str) -> Option<Vec<u8>> {
    let spec = parse_image_spec(spec_str)?;
    let seed = config.seed.rotate_left(17) ^ spec.seed;
    Some(if spec.png {
        render_png(spec.width, spec.height, spec.rgb, seed)
    } else {
        render_image(spec.width, spec.height, spec.rgb, seed)
    })
}

impl FixtureState {
    fn image(&self, spec_str: &str) -> Option<Arc<Vec<u8>>> {
        if let Some(hit) = self.cache.lock().expect("cache poisoned").get(spec_str) {
            return Some(Arc::clone(hit));
        }
        let bytes = Arc::new(render_spec(&self.config, spec_str)?);
        self.cache.lock().expect("cache poisoned").insert(spec_str.to_string(), Arc::clone(&bytes));
        Some(bytes)
    }

    fn hit(&self, path: &str) -> u32 {
        let mut hits = self.hits.lock().expect("hits poisoned");
        let n = hits.entry(path.to_string()).or_default();
        *n += 1;
        *n
    }

    async fn route(&self, full: &str, path: &str) -> Response {
        let segments: Vec<&str> = path.trim_start_matches('/').splitn(3, '/').collect();
        match segments.as_slice() {
            ["robots.txt"] => "User-agent: *\nDisallow: /private/\n".into_response(),
            ["img", spec] => match self.image(spec) {
                Some(b) => bytes_response(b.to_vec(), if spec.ends_with(".png") { "image/png" } else { "image/jpeg" }),
                None => StatusCode::NOT_FOUND.into_response(),
            },
            ["pad", len, spec] => match (len.parse::<usize>(), self.image(spec)) {
                (Ok(len), Some(b)) if len <= 64 << 20 => bytes_response(pad_jpeg(&b, len), "image/jpeg"),
                _ => StatusCode::NOT_FOUND.into_response(),
            },
            ["flaky", n, rest] => match n.parse::<u32>() {
                Ok(n) if self.hit(full) <= n => StatusCode::SERVICE_UNAVAILABLE.into_response(),
                Ok(_) => Box::pin(self.route(full, &format!("/{rest}"))).await,
                Err(_) => StatusCode::NOT_FOUND.into_response(),
            },
            ["slow", ms, rest] => match ms.parse::<u64>() {
                Ok(ms) => {
                    tokio::time::sleep(Duration::from_millis(ms)).await;
                    Box::pin(self.route(full, &format!("/{rest}"))).await
                }
                Err(_) => StatusCode::NOT_FOUND.into_response(),
            },
            ["private", rest] => Box::pin(self.route(full, &format!("/{rest}"))).await,
            ["private", a, b] => Box::pin(self.route(full, &format!("/{a}/{b}"))).await,
            ["status", code, ..] => code
                .parse::<u16>()
                .ok()
                .and_then(|c| StatusCode::from_u16(c).ok())
                .map_or_else(|| StatusCode::NOT_FOUND.into_response(), IntoResponse::into_response),
            ["garbage", len, ..] => match len.parse::<usize>() {
                Ok(len) if len <= 64 << 20 => {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ len as u64);
                    let mut bytes = vec![0u8; len];
                    rng.fill_bytes(&mut bytes);
                    if let Some(b) = bytes.first_mut() {
                        *b = b'G';
                    }
                    bytes_response(bytes, "image/jpeg")
                }
                _ => StatusCode::NOT_FOUND.into_response(),
            },
            ["bomb", spec] => {
                let dims = spec.strip_suffix(".png").and_then(|s| s.split_once('x'));
                match dims.and_then(|(w, h)| Some((w.parse().ok()?, h.parse().ok()?))) {
                    Some((w, h)) => bytes_response(png_bomb(w, h, 8192), "image/png"),
                    None => StatusCode::NOT_FOUND.into_response(),
                }
            }
            _ => StatusCode::NOT_FOUND.into_response(),
        }
    }
}

async fn handle(State(state): State<Arc<FixtureState>>, uri: Uri) -> Response {
    let c = &state.counters;
    c.requests.fetch_add(1, Ordering::SeqCst);
    let now = c.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    c.peak_in_flight.fetch_max(now, Ordering::SeqCst);
    if state.config.latency_ms > 0 {
        tokio::time::sleep(Duration::from_millis(state.config.latency_ms)).await;
    }
    let path = uri.path().to_string();
    let resp = state.route(&path, &path).await;
    c.in_flight.fetch_sub(1, Ordering::SeqCst);
    resp
}

/// Running fixture server; shuts down when dropped.
pub struct FixtureServer {
    addr: SocketAddr,
    state: Arc<FixtureState>,
    shutdown: Option<oneshot::Sender<()>>,
}

impl FixtureServer {
    /// Binds `127.0.0.1:port` (0 picks a free port) and serves in the
    /// background on the current tokio runtime.
    pub async fn start(config: FixtureConfig, port: u16) -> std::io::Result<Self> {
        let state = Arc::new(FixtureState {
            config,
            counters: Counters::default(),
            hits: Mutex::new(HashMap::new()),
            cache: Mutex::new(HashMap::new()),
        });
        let app = Router::new().fallback(handle).with_state(Arc::clone(&state));
        let listener = tokio::net::TcpListener::bind(SocketAddr::from(([127, 0, 0, 1], port))).await?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        tokio::spawn(async move {
            let serve = axum::serve(listener, app).with_graceful_shutdown(async {
                let _ = rx.await;
            });
            if let Err(e) = serve.await {
                log::error!("fixture server stopped: {e}");
            }
        });
        Ok(Self { addr, state, shutdown: Some(tx) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn requests(&self) -> u64 {
        self.state.counters.requests.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> u64 {
        self.state.counters.peak_in_flight.load(Ordering::SeqCst)
    }

    pub fn hits(&self, path: &str) -> u32 {
        self.state.hits.lock().expect("hits poisoned").get(path).copied().unwrap_or(0)
    }

    pub fn reset_counters(&self) {
        let c = &self.state.counters;
        c.requests.store(0, Ordering::SeqCst);
        c.peak_in_flight.store(0, Ordering::SeqCst);
        self.state.hits.lock().expect("hits poisoned").clear();
    }
}

impl Drop for FixtureServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}
