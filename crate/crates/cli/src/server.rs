//! Local HTTP service behind the ranking UI. The session carries only
//! trajectory geometry; rewards never leave the process.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Mutex;
use tower_http::services::ServeDir;
use trofi_core::dataset::{load_dataset, strip_rewards, OfflineDataset};
use trofi_core::envs::EnvKind;
use trofi_core::error::RankingError;
use trofi_core::ranking::{check_permutation, save_ranking, subsample_trajectories, RankedSet, RankingSource, RANKING_VERSION};

use crate::args::ServeRankArgs;
use crate::commands::{require, DATASET_FILE, RANKING_FILE};
use crate::error::{CliError, Result};

pub const MAX_POINTS: usize = 100;

const PLACEHOLDER_PAGE: &str = "<!doctype html>\n<html><head><title>trofi ranking</title></head>\n<body><p>The ranking UI is not built. Session data is at <a href=\"/api/session\">/api/session</a>.</p></body></html>\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTrajectory {
    pub id: u64,
    pub steps: usize,
    pub states: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub env: EnvKind,
    pub dataset_hash: String,
    pub trajectories: Vec<SessionTrajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub dataset_hash: String,
    pub order: Vec<u64>,
}

/// At most `max` evenly spaced indices into `0..n`, always keeping both ends.
pub fn downsample_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    if max < 2 {
        return vec![0];
    }
    (0..max)
        .map(|k| ((k as f64) * (n - 1) as f64 / (max - 1) as f64).round() as usize)
        .collect()
}

/// The subsample a human is asked to rank, as 2D paths.
pub fn build_session(dataset: &OfflineDataset, fraction: f64, seed: u64) -> Result<Session> {
    let dataset = strip_rewards(dataset);
    let spec = dataset.spec();
    let trajectories = subsample_trajectories(&dataset, fraction, seed)?
        .into_iter()
        .map(|t| {
            let mut points: Vec<[f64; 2]> = t
                .transitions
                .iter()
                .map(|tr| spec.project_2d(&tr.state, tr.step_index))
                .collect();
            if let Some(last) = t.transitions.last() {
                points.push(spec.project_2d(&last.next_state, last.step_index + 1));
            }
            let states = downsample_indices(points.len(), MAX_POINTS)
                .into_iter()
                .map(|i| points[i])
                .collect();
            SessionTrajectory {
                id: t.episode_id,
                steps: t.transitions.len(),
                states,
            }
        })
        .collect();
    Ok(Session {
        env: dataset.env,
        dataset_hash: dataset.content_hash(),
        trajectories,
    })
}

pub struct AppState {
    session: Session,
    ids: BTreeSet<u64>,
    ranking_path: PathBuf,
    submit_lock: Mutex<()>,
}

impl AppState {
    pub fn new(session: Session, ranking_path: PathBuf) -> Self {
        let ids = session.trajectories.iter().map(|t| t.id).collect();
        Self {
            session,
            ids,
            ranking_path,
            submit_lock: Mutex::new(()),
        }
    }

    /// Holds the submission lock, so that concurrent posts see a conflict.
    pub fn try_lock_submissions(&self) -> Option<tokio::sync::MutexGuard<'_, ()>> {
        self.submit_lock.try_lock().ok()
    }
}

fn detail(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "detail": message.into() }))).into_response()
}

async fn get_session(State(state): State<Arc<AppState>>) -> Json<Session> {
    Json(state.session.clone())
}

async fn post_ranking(State(state): State<Arc<AppState>>, body: Result<Json<Submission>, JsonRejection>) -> Response {
    let Some(_guard) = state.try_lock_submissions() else {
        return detail(StatusCode::CONFLICT, "another ranking submission is in progress");
    };
    let Json(submission) = match body {
        Ok(b) => b,
        Err(rejection) => return detail(StatusCode::UNPROCESSABLE_ENTITY, rejection.body_text()),
    };
    if submission.dataset_hash != state.session.dataset_hash {
        let err = RankingError::StaleRanking {
            expected: state.session.dataset_hash.clone(),
            found: submission.dataset_hash,
        };
        return detail(StatusCode::UNPROCESSABLE_ENTITY, err.to_string());
    }
    if let Err(err) = check_permutation(&submission.order, &state.ids) {
        return detail(StatusCode::UNPROCESSABLE_ENTITY, err.to_string());
    }
    let ranked = RankedSet {
        version: RANKING_VERSION,
        env: state.session.env,
        dataset_hash: submission.dataset_hash,
        source: RankingSource::Human,
        trajectory_ids: submission.order,
    };
    match save_ranking(&ranked, &state.ranking_path) {
        Ok(()) => (
            StatusCode::OK,
            Json(json!({ "path": state.ranking_path.display().to_string(), "ranked": ranked.len() })),
        )
            .into_response(),
        Err(e) => detail(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn placeholder() -> Html<&'static str> {
    Html(PLACEHOLDER_PAGE)
}

pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/session", get(get_session))
        .route("/api/ranking", axum::routing::post(post_ranking))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(placeholder)),
    }
}

pub fn serve(args: &ServeRankArgs) -> Result<()> {
    let dataset_path = args.dataset.clone().unwrap_or_else(|| args.out.join(DATASET_FILE));
    let dataset = load_dataset(&require(&dataset_path, "gen-data")?)?;
    let session = build_session(&dataset, args.fraction, args.seed)?;
    if let Some(dir) = &args.ui_dir {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("UI directory {} does not exist", dir.display())));
        }
    }
    std::fs::create_dir_all(&args.out)?;
    let n = session.trajectories.len();
    let state = Arc::new(AppState::new(session, args.out.join(RANKING_FILE)));
    let app = router(state, args.ui_dir.as_deref());
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let addr = std::net::SocketAddr::from(([127, 0, 0, 1], args.port));
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Server(format!("cannot listen on {addr}: {e}")))?;
        println!("ranking session with {n} trajectories at http://{addr}/");
        axum::serve(listener, app)
            .await
            .map_err(|e| CliError::Server(e.to_string()))
    })
}
