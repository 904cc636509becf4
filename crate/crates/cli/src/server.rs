//! HTTP front for the audit store.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use curate_core::audit::{AgreementReport, AuditError, AuditStore, Label, StratumStatus, VerdictAck};
use serde::{Deserialize, Serialize};

pub struct ApiError(AuditError);

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            AuditError::UnknownTask(_) => (StatusCode::NOT_FOUND, "unknown_task"),
            AuditError::InvalidLabel(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_label"),
            AuditError::LeaseExpired { .. } => (StatusCode::CONFLICT, "lease_expired"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{}", self.0);
        }
        let body = ErrorBody {
            error: kind.to_string(),
            message: self.0.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

impl From<AuditError> for ApiError {
    fn from(e: AuditError) -> Self {
        ApiError(e)
    }
}

#[derive(Debug, Deserialize)]
pub struct NextQuery {
    pub annotator: String,
}

/// Verdict submission body. The label is taken as a plain string so an
/// unknown label reports as `invalid_label` rather than a decode failure.
#[derive(Debug, Serialize, Deserialize)]
pub struct VerdictBody {
    pub annotator_id: String,
    pub label: String,
    #[serde(default)]
    pub note: Option<String>,
}

pub fn router(store: Arc<AuditStore>) -> Router {
    Router::new()
        .route("/audit/tasks/next", get(next_task))
        .route("/audit/tasks/{task_id}/verdict", post(submit_verdict))
        .route("/audit/agreement", get(agreement))
        .route("/audit/strata", get(strata))
        .with_state(store)
}

async fn next_task(State(store): State<Arc<AuditStore>>, Query(q): Query<NextQuery>) -> Result<Response, ApiError> {
    Ok(match store.lease_next(&q.annotator)? {
        Some(leased) => Json(leased).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn submit_verdict(
    State(store): State<Arc<AuditStore>>,
    Path(task_id): Path<String>,
    Json(body): Json<VerdictBody>,
) -> Result<Json<VerdictAck>, ApiError> {
    let label: Label = body.label.parse()?;
    Ok(Json(store.submit_verdict(&task_id, &body.annotator_id, label, body.note)?))
}

async fn agreement(State(store): State<Arc<AuditStore>>) -> Json<AgreementReport> {
    Json(store.agreement())
}

async fn strata(State(store): State<Arc<AuditStore>>) -> Json<BTreeMap<String, StratumStatus>> {
    Json(store.strata())
}

/// Serve until ctrl-c.
pub async fn serve(store: Arc<AuditStore>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("audit service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(store))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
