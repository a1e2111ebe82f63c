import logging
from contextlib import asynccontextmanager
from typing import List

import numpy as np
from dotenv import load_dotenv
from fastapi import Depends, FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware

from voxfuse import __version__
from voxfuse.auth import require_editor
from voxfuse.errors import DomainError
from voxfuse.models import (EditRequest, EditResponse, GridSummary, HealthResponse, QueryConfig, RelevanceRequest,
                            RelevanceResponse, TransferRequest, TransferResponse, VoxelKeyModel)
from voxfuse.query import QueryEmbedding, edit_voxels, mask3d, relevance, solid_color_sh, transfer_pointcloud
from voxfuse.store import grid_store

# Load environment variables
load_dotenv()

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = QueryConfig().threshold


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Application lifespan manager"""
    try:
        grid_store.connect()
        logger.info("Query service started")
    except Exception as e:
        logger.error(f"Failed to start query service: {e}")
        raise

    yield

    grid_store.close()
    logger.info("Query service stopped")


app = FastAPI(
    title="voxfuse query service",
    description="Open-vocabulary queries over a fused sparse voxel grid",
    version=__version__,
    lifespan=lifespan
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


def _require_grid():
    if not grid_store.loaded:
        raise HTTPException(status_code=404, detail="No grid loaded")
    return grid_store.grid


def _embedding(label: str) -> QueryEmbedding:
    emb = grid_store.embedding(label)
    if emb is None:
        raise HTTPException(status_code=404, detail=f"Unknown query label '{label}'")
    return emb


@app.get("/health", response_model=HealthResponse)
def health():
    """Liveness check"""
    return HealthResponse(status="ok", version=__version__, grid_loaded=grid_store.loaded)


@app.get("/api/grid", response_model=GridSummary)
def grid_summary():
    """Voxel counts, feature dimension and bounds of the served grid"""
    grid = grid_store.grid
    if grid is None:
        raise HTTPException(status_code=404, detail="No grid loaded")
    fused = int(np.count_nonzero(grid.fused_mask()))
    return GridSummary(
        voxel_count=len(grid),
        fused_count=fused,
        fused_fraction=fused / len(grid) if len(grid) else 0.0,
        feature_dim=grid.feature_dim,
        sh_degree=grid.sh_degree,
        bounds_min=list(grid.bounds.minimum),
        bounds_max=list(grid.bounds.maximum),
        levels=sorted({int(lv) for lv in grid.levels.tolist()}),
    )


@app.get("/api/queries", response_model=List[str])
def list_queries():
    """Labels of the loaded query embeddings"""
    return [e.label for e in grid_store.embeddings]


@app.post("/api/relevance", response_model=RelevanceResponse)
def query_relevance(request: RelevanceRequest):
    """Score every fused voxel against a label or raw embedding and threshold"""
    grid = _require_grid()
    if request.label is None and request.vector is None:
        raise HTTPException(status_code=400, detail="Provide a label or a vector")
    try:
        if request.vector is not None:
            emb = QueryEmbedding(request.label or "vector", request.vector)
        else:
            emb = _embedding(request.label)
        threshold = request.threshold if request.threshold is not None else DEFAULT_THRESHOLD
        result = relevance(grid, emb)
        mask = mask3d(grid, result, threshold)
        scores = np.nan_to_num(result.normalized, nan=-1.0)
        top = [i for i in np.argsort(-scores, kind="stable")[:request.top] if result.fused[i]]
        raw = result.raw[result.fused]
        return RelevanceResponse(
            label=emb.label,
            threshold=threshold,
            mask_size=len(mask.indices),
            fused_count=int(np.count_nonzero(result.fused)),
            raw_min=float(raw.min()),
            raw_max=float(raw.max()),
            top_voxels=[VoxelKeyModel(level=grid.key(i).level, code=grid.key(i).code) for i in top],
            top_scores=[float(scores[i]) for i in top],
        )
    except HTTPException:
        raise
    except DomainError as e:
        logger.error(f"Relevance query failed: {e}")
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.error(f"Error answering relevance query: {e}")
        raise HTTPException(status_code=500, detail=str(e))


@app.post("/api/transfer", response_model=TransferResponse)
def transfer(request: TransferRequest):
    """Label points from their nearest fused voxels"""
    grid = _require_grid()
    try:
        labels = request.labels or [e.label for e in grid_store.embeddings]
        classes = [_embedding(label) for label in labels]
        result = transfer_pointcloud(grid, np.asarray(request.points, dtype=np.float64), classes, request.k)
        return TransferResponse(
            class_labels=labels,
            labels=result.labels.tolist(),
            probabilities=result.probabilities.tolist(),
        )
    except HTTPException:
        raise
    except DomainError as e:
        logger.error(f"Point transfer failed: {e}")
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.error(f"Error transferring labels: {e}")
        raise HTTPException(status_code=500, detail=str(e))


@app.post("/api/edit", response_model=EditResponse)
def edit(request: EditRequest, admin_verified: bool = Depends(require_editor)):
    """Recolor the voxels retrieved by a label (Admin only)"""
    grid = _require_grid()
    try:
        emb = _embedding(request.label)
        threshold = request.threshold if request.threshold is not None else DEFAULT_THRESHOLD
        with grid_store.lock:
            mask = mask3d(grid, relevance(grid, emb), threshold)
            edit_voxels(grid, mask.keys, solid_color_sh(request.color, grid.sh_degree))
        logger.info(f"Recolored {len(mask.keys)} voxels for '{request.label}'")
        return EditResponse(message=f"Recolored voxels matching '{request.label}'", edited_voxels=len(mask.keys))
    except HTTPException:
        raise
    except DomainError as e:
        logger.error(f"Edit failed: {e}")
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.error(f"Error editing grid: {e}")
        raise HTTPException(status_code=500, detail=str(e))
