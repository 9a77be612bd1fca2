"""completion endpoint of the mock server"""

import logging

from quart import Blueprint, current_app
from quart_schema import validate_request, validate_response

from ..completion import ModelNotFound, serve_completion
from ..schema import CompletionRequest, CompletionResponse

blue = Blueprint('completions', __name__, url_prefix='/v1')
logger = logging.getLogger(__name__)


@blue.route('/completions', methods=['POST'])
@validate_request(CompletionRequest)
@validate_response(CompletionResponse)
async def create_completion(data: CompletionRequest) -> CompletionResponse:
    """greedy completion of the prompt, optionally echoing it with logprobs"""
    models = current_app.config['MODELS']
    if data.model not in models:
        raise ModelNotFound(data.model)
    logger.debug('completion for %s: %d prompt chars, echo=%s', data.model, len(data.prompt), data.echo)
    return serve_completion(models[data.model], data, current_app.config['SUPPORTS_ECHO'])
