from fastapi import APIRouter
from pydantic import BaseModel, Field

from core import queue

router = APIRouter(tags=["score"])


class PllRequest(BaseModel):
    sentence: str = Field(min_length=1)


class PairRequest(BaseModel):
    good: str = Field(min_length=1)
    bad: str = Field(min_length=1)


@router.post("/pll")
async def pll(request: PllRequest):
    score, time = await queue.run(queue.model_handler.pll, request.sentence)
    return {"pll": score, "time": time}


@router.post("/pair")
async def pair(request: PairRequest):
    result, time = await queue.run(queue.model_handler.score_pair, request.good, request.bad)
    return {**result, "time": time}
