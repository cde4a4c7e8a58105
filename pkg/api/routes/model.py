from fastapi import APIRouter

from core import queue

router = APIRouter(tags=["model"])


@router.get("")
async def summary():
    result, _ = await queue.run(queue.model_handler.summary)
    return result


@router.post("/unload")
async def unload():
    queue.model_handler.unload()
    return {"message": "Model unloaded"}
