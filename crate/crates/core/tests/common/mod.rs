//! Synthetic fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use locbench::convo::{build_conversation, sample_indices, Conversation, NamePool, Naming};
use locbench::ingest::{DatasetManifest, Frame, Source, Track};
use locbench::{BBox, Space};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const W: u32 = 640;
pub const H: u32 = 480;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Integer pixel box with positive area inside `x_range` x `y_range`.
pub fn random_box(rng: &mut impl Rng, x_range: (u32, u32), y_range: (u32, u32)) -> [f64; 4] {
    let (x0, x1) = loop {
        let a = rng.random_range(x_range.0..=x_range.1);
        let b = rng.random_range(x_range.0..=x_range.1);
        if a != b {
            break (a.min(b), a.max(b));
        }
    };
    let (y0, y1) = loop {
        let a = rng.random_range(y_range.0..=y_range.1);
        let b = rng.random_range(y_range.0..=y_range.1);
        if a != b {
            break (a.min(b), a.max(b));
        }
    };
    [x0 as f64, y0 as f64, x1 as f64, y1 as f64]
}

pub fn track(source: Source, category: &str, video_id: &str, boxes: &[[f64; 4]]) -> Track {
    let space = Space::pixel(W, H).unwrap();
    Track {
        track_id: format!("{video_id}-t"),
        video_id: video_id.to_string(),
        source,
        category: category.to_string(),
        frames: boxes
            .iter()
            .enumerate()
            .map(|(i, b)| Frame {
                image_ref: format!("https://img.test/{video_id}/{i:05}.jpg"),
                frame_index: i as u64,
                width: W,
                height: H,
                bbox: BBox::new(b[0], b[1], b[2], b[3], space).unwrap(),
            })
            .collect(),
    }
}

pub fn random_track(rng: &mut impl Rng, source: Source, category: &str, video_id: &str, len: usize) -> Track {
    let boxes: Vec<_> = (0..len).map(|_| random_box(rng, (0, W), (0, H))).collect();
    track(source, category, video_id, &boxes)
}

/// Manifest with `cats` categories of `per_cat` tracks each.
pub fn manifest(name: &str, source: Source, cats: &[&str], per_cat: usize, len: (usize, usize), seed: u64) -> DatasetManifest {
    let mut r = rng(seed);
    let mut tracks = Vec::new();
    for (ci, c) in cats.iter().enumerate() {
        for j in 0..per_cat {
            let n = r.random_range(len.0..=len.1);
            tracks.push(random_track(&mut r, source, c, &format!("{name}-{ci}-{j}"), n));
        }
    }
    DatasetManifest::new(name, tracks)
}

/// Conversations whose last shot box equals the target box.
pub fn last_shot_is_target(count: usize, seed: u64) -> Vec<Conversation> {
    let mut r = rng(seed);
    let pool = NamePool::builtin();
    (0..count)
        .map(|i| {
            let n = 1 + i % 8;
            let len = n + 1 + r.random_range(0..20);
            let mut boxes: Vec<_> = (0..len).map(|_| random_box(&mut r, (0, W), (0, H))).collect();
            let idx = sample_indices(len, n + 1).unwrap();
            boxes[idx[n - 1]] = boxes[len - 1];
            let t = track(Source::Custom, "kettle", &format!("same-{i:04}"), &boxes);
            let naming = if i % 2 == 0 { Naming::Real } else { Naming::Pseudo };
            build_conversation(&t, n, naming, &pool, i as u64).unwrap()
        })
        .collect()
}

/// Conversations whose shots never overlap the target: targets live in the
/// left half of the frame, shots in the right half.
pub fn shots_disjoint_from_target(count: usize, seed: u64) -> Vec<Conversation> {
    let mut r = rng(seed);
    let pool = NamePool::builtin();
    (0..count)
        .map(|i| {
            let n = 1 + i % 8;
            let len = n + 1 + r.random_range(0..20);
            let mut boxes: Vec<_> = (0..len).map(|_| random_box(&mut r, (W / 2 + 10, W), (0, H))).collect();
            boxes[len - 1] = random_box(&mut r, (0, W / 2 - 10), (0, H));
            let t = track(Source::Custom, "kettle", &format!("apart-{i:04}"), &boxes);
            build_conversation(&t, n, Naming::Real, &pool, i as u64).unwrap()
        })
        .collect()
}

/// Random-geometry conversations across two sources, used by run-level tests.
pub fn mixed_conversations(count: usize, seed: u64) -> Vec<Conversation> {
    let mut r = rng(seed);
    let pool = NamePool::builtin();
    (0..count)
        .map(|i| {
            let n = 1 + i % 4;
            let len = n + 1 + r.random_range(0..10);
            let source = if i % 3 == 0 { Source::Pdm } else { Source::Lasot };
            let t = random_track(&mut r, source, "lamp", &format!("mix-{i:05}"), len);
            let naming = if i % 2 == 0 { Naming::Real } else { Naming::Pseudo };
            build_conversation(&t, n, naming, &pool, i as u64).unwrap()
        })
        .collect()
}

/// PerSeg-style tree: one binary-masked object per image.
pub fn write_perseg(root: &Path, images_per_cat: &[usize]) {
    for (c, &n) in images_per_cat.iter().enumerate() {
        let cat = format!("obj{c:02}");
        let img_dir = root.join("Images").join(&cat);
        let ann_dir = root.join("Annotations").join(&cat);
        std::fs::create_dir_all(&img_dir).unwrap();
        std::fs::create_dir_all(&ann_dir).unwrap();
        for i in 0..n {
            RgbImage::from_pixel(12, 10, Rgb([90, 90, 90])).save(img_dir.join(format!("{i:02}.png"))).unwrap();
            let mut m = GrayImage::new(12, 10);
            for y in 2..6 {
                for x in 1 + i as u32 % 4..8 {
                    m.put_pixel(x, y, Luma([255]));
                }
            }
            m.save(ann_dir.join(format!("{i:02}.png"))).unwrap();
        }
    }
}

/// PDM-style tree: indexed masks with `objects[i]` objects in image `i`.
pub fn write_pdm(root: &Path, categories: usize, objects: &[u32]) {
    for c in 0..categories {
        let cat = format!("scene{c:03}");
        let img_dir = root.join("images").join(&cat);
        let mask_dir = root.join("masks").join(&cat);
        std::fs::create_dir_all(&img_dir).unwrap();
        std::fs::create_dir_all(&mask_dir).unwrap();
        for (i, &k) in objects.iter().enumerate() {
            RgbImage::new(16, 4).save(img_dir.join(format!("{i}.png"))).unwrap();
            let mut m = GrayImage::new(16, 4);
            for label in 1..=k {
                let x = (label - 1) * 3;
                for y in 0..3 {
                    m.put_pixel(x, y, Luma([label as u8]));
                    m.put_pixel(x + 1, y, Luma([label as u8]));
                }
            }
            m.save(mask_dir.join(format!("{i}.png"))).unwrap();
        }
    }
}

// ---------------------------------------------------------------------------
// fake chat-completions endpoint

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use serde_json::{json, Value};

pub enum Reply {
    Text(String),
    Status(u16),
    /// Never answers within any reasonable client timeout.
    Hang,
}

pub type Script = dyn Fn(usize, &Value) -> Reply + Send + Sync;

#[derive(Default)]
pub struct FakeStats {
    pub requests: AtomicUsize,
    pub in_flight: AtomicUsize,
    pub peak: AtomicUsize,
    pub bodies: Mutex<Vec<Value>>,
    pub auth: Mutex<Vec<Option<String>>>,
}

struct FakeState {
    stats: Arc<FakeStats>,
    script: Box<Script>,
    delay: Duration,
    hang_counted: Duration,
}

pub struct FakeServer {
    pub url: String,
    pub stats: Arc<FakeStats>,
}

struct InFlight(Arc<FakeStats>);

impl InFlight {
    fn enter(stats: &Arc<FakeStats>) -> Self {
        let now = stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        stats.peak.fetch_max(now, Ordering::SeqCst);
        InFlight(stats.clone())
    }
}

impl Drop for InFlight {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

async fn handle(State(s): State<Arc<FakeState>>, headers: HeaderMap, body: Bytes) -> Response {
    let guard = InFlight::enter(&s.stats);
    let n = s.stats.requests.fetch_add(1, Ordering::SeqCst);
    let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    s.stats
        .auth
        .lock()
        .unwrap()
        .push(headers.get("authorization").and_then(|v| v.to_str().ok()).map(String::from));
    let reply = (s.script)(n, &body);
    s.stats.bodies.lock().unwrap().push(body);
    tokio::time::sleep(s.delay).await;
    match reply {
        Reply::Text(t) => axum::Json(json!({
            "id": format!("cmpl-{n}"),
            "object": "chat.completion",
            "choices": [{"index": 0, "message": {"role": "assistant", "content": t}, "finish_reason": "stop"}],
        }))
        .into_response(),
        Reply::Status(code) => {
            (StatusCode::from_u16(code).unwrap(), format!("injected {code}")).into_response()
        }
        Reply::Hang => {
            tokio::time::sleep(s.hang_counted).await;
            drop(guard);
            tokio::time::sleep(Duration::from_secs(30)).await;
            StatusCode::GATEWAY_TIMEOUT.into_response()
        }
    }
}

/// Serves `POST /v1/chat/completions` on a random local port. `script`
/// decides each reply from the request number and body.
pub async fn spawn_fake(
    delay: Duration,
    script: impl Fn(usize, &Value) -> Reply + Send + Sync + 'static,
) -> FakeServer {
    spawn_fake_with(delay, Duration::from_secs(30), script).await
}

/// Like [`spawn_fake`], but a hanging request stops counting as in flight
/// after `hang_counted` (or when the client disconnects, if earlier). Set it
/// a little below the client timeout: past that point the client may have
/// given up and sent its next request before the server sees the closed
/// connection.
pub async fn spawn_fake_with(
    delay: Duration,
    hang_counted: Duration,
    script: impl Fn(usize, &Value) -> Reply + Send + Sync + 'static,
) -> FakeServer {
    let stats = Arc::new(FakeStats::default());
    let state = Arc::new(FakeState { stats: stats.clone(), script: Box::new(script), delay, hang_counted });
    let app = Router::new().route("/v1/chat/completions", post(handle)).with_state(state);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    FakeServer { url: format!("http://{addr}/v1"), stats }
}

/// The query-image URL of a request body, used to key scripted answers.
pub fn query_image(body: &Value) -> String {
    body["messages"]
        .as_array()
        .and_then(|m| m.last())
        .and_then(|m| m["content"][0]["image_url"]["url"].as_str())
        .unwrap_or_default()
        .to_string()
}
