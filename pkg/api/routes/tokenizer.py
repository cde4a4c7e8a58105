from typing import List, Tuple

from fastapi import APIRouter
from pydantic import BaseModel

from core import queue

router = APIRouter(tags=["tokenizer"])


class EncodeRequest(BaseModel):
    text: str


class EncodeResponse(BaseModel):
    ids: List[int]
    offsets: List[Tuple[int, int]]


class DecodeRequest(BaseModel):
    ids: List[int]


class DecodeResponse(BaseModel):
    text: str


@router.post("/encode", response_model=EncodeResponse)
async def encode(request: EncodeRequest):
    encoding, _ = await queue.run(queue.model_handler.encode, request.text)
    return EncodeResponse(ids=encoding.ids, offsets=encoding.offsets)


@router.post("/decode", response_model=DecodeResponse)
async def decode(request: DecodeRequest):
    text, _ = await queue.run(queue.model_handler.decode, request.ids)
    return DecodeResponse(text=text)
