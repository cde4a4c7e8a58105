from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from api.routes import model, score, tokenizer
from core.errors import ConfigurationError, PipelineError

app = FastAPI(docs_url="/api/docs", redoc_url="/api/redoc")

# Origins that are allowed to access the API
origins = [
    "http://localhost:5173",
    "https://localhost:5173",
]

app.add_middleware(
    CORSMiddleware,
    allow_origins=origins,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.exception_handler(PipelineError)
async def pipeline_error_handler(request: Request, exc: PipelineError):
    status = 503 if isinstance(exc, ConfigurationError) else 400
    return JSONResponse(status_code=status, content={"detail": f"{type(exc).__name__}: {exc}"})


# Mount routers
app.include_router(tokenizer.router, prefix="/api/tokenizer")
app.include_router(score.router, prefix="/api/score")
app.include_router(model.router, prefix="/api/model")
