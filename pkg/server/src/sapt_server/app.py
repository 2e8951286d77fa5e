"""FastAPI implementation of the text-generation wire protocol.

Endpoints:
  POST /generate  {"input", "max_len", "decode", "beam_width"} -> {"output"}
  GET  /healthz   -> 200

Echo test-mode returns the input verbatim, so the protocol is fully testable
without model weights; a seq2seq model backend can be plugged in behind the
same contract. Malformed request bodies receive HTTP 400.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

GREEDY = "greedy"
BEAM = "beam"
ECHO_MODEL = "echo"


class ServerError(RuntimeError):
    pass


@dataclass(frozen=True)
class ServerConfig:
    model: str = ECHO_MODEL       # "echo" or a seq2seq model identifier
    device: str = "cpu"
    default_beam_width: int = 1
    max_input_len: int = 4096
    port: int = 8000

    def __post_init__(self):
        if self.default_beam_width < 1:
            raise ValueError("default beam width must be >= 1")
        if not (0 < self.port < 65536):
            raise ValueError(f"invalid port {self.port}")
        if self.max_input_len < 1:
            raise ValueError("max input length must be >= 1")


class GenerateRequest(BaseModel):
    input: str
    max_len: int = Field(default=64, ge=1)
    decode: str = Field(default=GREEDY, pattern=f"^({GREEDY}|{BEAM})$")
    beam_width: int = Field(default=1, ge=1)


class GenerateResponse(BaseModel):
    output: str


class Generator:
    """Interface for the model behind /generate."""

    def generate(self, req: GenerateRequest) -> str:
        raise NotImplementedError


class EchoGenerator(Generator):
    """Identity generator for the weight-free test mode."""

    def generate(self, req: GenerateRequest) -> str:
        return req.input


class Seq2SeqGenerator(Generator):
    """Pretrained encoder-decoder model; loaded lazily on first request."""

    def __init__(self, cfg: ServerConfig):
        self.cfg = cfg
        self._model = None
        self._tokenizer = None

    def _load(self):
        if self._model is None:
            try:
                from transformers import AutoModelForSeq2SeqLM, AutoTokenizer
            except ImportError as e:
                raise ServerError(
                    "model mode requires the optional [model] dependencies"
                ) from e
            self._tokenizer = AutoTokenizer.from_pretrained(self.cfg.model)
            self._model = AutoModelForSeq2SeqLM.from_pretrained(self.cfg.model)
            self._model.to(self.cfg.device)
            self._model.eval()

    def generate(self, req: GenerateRequest) -> str:
        self._load()
        beams = req.beam_width if req.decode == BEAM else 1
        inputs = self._tokenizer(
            req.input, return_tensors="pt", truncation=True,
            max_length=self.cfg.max_input_len,
        ).to(self.cfg.device)
        ids = self._model.generate(
            **inputs, max_new_tokens=req.max_len, num_beams=beams, do_sample=False
        )
        return self._tokenizer.decode(ids[0], skip_special_tokens=True)


def make_generator(cfg: ServerConfig) -> Generator:
    if cfg.model == ECHO_MODEL:
        return EchoGenerator()
    return Seq2SeqGenerator(cfg)


def create_app(cfg: ServerConfig | None = None) -> FastAPI:
    cfg = cfg or ServerConfig()
    app = FastAPI(title="sapt-server", version="0.1.0")
    generator = make_generator(cfg)

    @app.exception_handler(RequestValidationError)
    async def bad_request(request: Request, exc: RequestValidationError):
        # The wire protocol specifies 400 for malformed bodies.
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "model": cfg.model}

    @app.post("/generate", response_model=GenerateResponse)
    def generate(req: GenerateRequest):
        try:
            return GenerateResponse(output=generator.generate(req))
        except Exception as e:  # noqa: BLE001 - model failures map to 500
            return JSONResponse(status_code=500, content={"detail": str(e)})

    return app


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(description="Run the inference server.")
    parser.add_argument("--model", default=ECHO_MODEL,
                        help="'echo' or a seq2seq model identifier")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--port", type=int, default=8000)
    parser.add_argument("--host", default="127.0.0.1")
    args = parser.parse_args(argv)
    cfg = ServerConfig(model=args.model, device=args.device, port=args.port)

    import uvicorn

    uvicorn.run(create_app(cfg), host=args.host, port=cfg.port)


if __name__ == "__main__":
    main()
