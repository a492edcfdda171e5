from fastapi import APIRouter, HTTPException
from fastapi.concurrency import run_in_threadpool
from typing import List
import logging
from ..controllers.experiment_controller import experiment_controller
from ..exceptions import DivergenceError, ReconLabError
from ..models.schemas import (
    ExperimentConfig,
    RunResponse,
    ErrorResponse,
    HealthResponse
)
from ..config import settings

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/api/v1/experiments", tags=["Experiments"])

@router.post(
    "/run",
    response_model=RunResponse,
    responses={
        400: {"model": ErrorResponse, "description": "Bad Request"},
        422: {"model": ErrorResponse, "description": "Experiment Diverged"},
        500: {"model": ErrorResponse, "description": "Internal Server Error"}
    },
    summary="Run an experiment",
    description="Run one experiment from its configuration and return the headline numbers and the artifacts written."
)
async def run_experiment(config: ExperimentConfig):
    """
    Run an experiment synchronously in a worker thread.

    - **kind**: experiment kind (see /kinds)
    - **seed**: seed of every random draw in the run
    """
    try:
        return await run_in_threadpool(experiment_controller.run, config)
    except DivergenceError as e:
        raise HTTPException(status_code=422, detail=f"Diverged: {str(e)}")
    except ReconLabError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except HTTPException:
        raise
    except Exception as e:
        logger.error(f"Unexpected error in run endpoint: {str(e)}")
        raise HTTPException(status_code=500, detail="Internal server error")

@router.get(
    "/kinds",
    response_model=List[str],
    summary="Get experiment kinds",
    description="Get the list of experiment kinds the lab can run."
)
async def get_experiment_kinds():
    return experiment_controller.get_experiment_kinds()

@router.get(
    "/health",
    response_model=HealthResponse,
    summary="Health check",
    description="Check the health status of the experiment service."
)
async def health_check():
    """
    Health check endpoint.
    """
    try:
        from ..services.wavelets import build_basis

        build_basis(settings.wavelet_family)
        status = "healthy"
    except Exception as e:
        logger.error(f"Health check failed: {str(e)}")
        status = "unhealthy"
    return HealthResponse(
        status=status,
        version=settings.version,
        wavelet_family=settings.wavelet_family,
        threads=settings.threads,
        experiment_kinds=experiment_controller.get_experiment_kinds()
    )
