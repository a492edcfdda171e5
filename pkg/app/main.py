import logging
import os
from contextlib import asynccontextmanager
from fastapi import FastAPI, HTTPException
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from .config import settings
from .exceptions import ReconLabError
from .logging_config import setup_logging
from .views.experiment_views import router as experiment_router

setup_logging()
logger = logging.getLogger(__name__)

@asynccontextmanager
async def lifespan(app: FastAPI):
    """Lifespan events"""
    # Startup
    logger.info("Starting Multiparameter Reconstruction Lab API")
    logger.info(f"Default wavelet family: {settings.wavelet_family}, threads: {settings.threads}")

    os.makedirs(settings.output_dir, exist_ok=True)
    logger.info(f"Output directory created/verified: {settings.output_dir}")

    yield

    # Shutdown
    logger.info("Shutting down Multiparameter Reconstruction Lab API")

# Create FastAPI app
app = FastAPI(
    title=settings.app_name,
    description="Reconstruction, stochastic sewing and SPDE experiments on dyadic grids of [0,T]^d.",
    version=settings.version,
    lifespan=lifespan
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

@app.exception_handler(Exception)
async def global_exception_handler(request, exc):
    logger.error(f"Global exception on {request.url}: {str(exc)}", exc_info=True)
    return JSONResponse(
        status_code=500,
        content={
            "error": "Internal server error",
            "detail": str(exc),
            "path": str(request.url)
        }
    )

@app.exception_handler(ReconLabError)
async def lab_exception_handler(request, exc: ReconLabError):
    logger.warning(f"{type(exc).__name__} on {request.url}: {str(exc)}")
    return JSONResponse(
        status_code=400,
        content={"error": type(exc).__name__, "detail": str(exc)}
    )

@app.exception_handler(RequestValidationError)
async def validation_exception_handler(request, exc: RequestValidationError):
    logger.warning(f"Invalid request on {request.url}: {exc.errors()}")
    return JSONResponse(
        status_code=422,
        content={"error": "Invalid configuration", "detail": str(exc.errors())}
    )

@app.exception_handler(HTTPException)
async def http_exception_handler(request, exc: HTTPException):
    logger.warning(f"HTTP {exc.status_code} on {request.url}: {exc.detail}")
    return JSONResponse(
        status_code=exc.status_code,
        content={"error": exc.detail}
    )

app.include_router(experiment_router)

@app.get("/", tags=["Root"])
async def root():
    """Root endpoint with API information"""
    return {
        "message": f"Welcome to {settings.app_name}",
        "version": settings.version,
        "endpoints": {
            "docs": "/docs",
            "health": "/api/v1/experiments/health",
            "run": "/api/v1/experiments/run",
            "kinds": "/api/v1/experiments/kinds"
        }
    }

@app.get("/health", tags=["Root"])
async def health():
    """Simple health check"""
    return {
        "status": "ok",
        "version": settings.version,
        "service": "reconstruction-lab"
    }
